"""
Decoder Search - progressive RL search of detection decoders

This package searches FPN and prediction-head structures for an anchor-free
detector on a synthetic detection task:

- search_space: decoder grammar and token encoding
- decoder_graph: compilation of configs into executable graphs
- tensor_engine: numpy autodiff, Adam, Polyak averaging
- detection_toyland: synthetic dataset, targets, losses, reward, toy AP
- cost_model: analytic MACs and parameter counts
- controller: LSTM policy trained with PPO
- orchestrator: caches, proxy training, progressive search, studies
- dispatcher: TCP job farm for architecture evaluations
"""

from .controller import Controller, PolicyConfig
from .cost_model import CostReport, cost
from .decoder_graph import DecoderGraph, DecoderWidths, compile_decoder, forward, init_params, original_fcos_decoder
from .detection_toyland import compute_losses, evaluate_ap, generate_dataset, reward
from .dispatcher import Coordinator, EvalRequest, EvalResult, LocalEvaluator, RemoteEvaluator, run_worker
from .errors import DecoderSearchError
from .orchestrator import (
    ablation_modes,
    correlation_study,
    evaluate_architecture,
    prepare_backbone,
    run_progressive_search,
    sharing_trend,
)
from .plan import SearchPlan, load_plan
from .search_log import SearchRecord, read_log, top_k
from .search_space import DecoderConfig, FpnConfig, HeadConfig, SearchStage, action_space, decode, encode, space_size

__all__ = [
    'Controller',
    'PolicyConfig',
    'CostReport',
    'cost',
    'DecoderGraph',
    'DecoderWidths',
    'compile_decoder',
    'forward',
    'init_params',
    'original_fcos_decoder',
    'compute_losses',
    'evaluate_ap',
    'generate_dataset',
    'reward',
    'Coordinator',
    'EvalRequest',
    'EvalResult',
    'LocalEvaluator',
    'RemoteEvaluator',
    'run_worker',
    'DecoderSearchError',
    'ablation_modes',
    'correlation_study',
    'evaluate_architecture',
    'prepare_backbone',
    'run_progressive_search',
    'sharing_trend',
    'SearchPlan',
    'load_plan',
    'SearchRecord',
    'read_log',
    'top_k',
    'DecoderConfig',
    'FpnConfig',
    'HeadConfig',
    'SearchStage',
    'action_space',
    'decode',
    'encode',
    'space_size',
]
