#!/usr/bin/env python3
"""
DECODER SEARCH SPACE
====================

Grammar of candidate detection decoders and its token encoding.

A decoder is three components:
    FPN      7 basic blocks; block t picks two features from the sampling pool
             (pool starts as {c3, c4, c5} and grows by one per block), applies
             one unary op to each, and aggregates them (sum or concat + 1x1).
    Head     a sequence of 6 unary ops applied at every pyramid level.
    Sharing  index i: head layers before i have per-level weights, the rest
             share one set of weights across levels.

Token layout (42 positions):
    [id1, id2, op1, op2, agg] x 7   vocab [t+2, t+2, 5, 5, 2] for block t
    [op] x 6                        vocab 7
    [share_from]                    vocab 7

Operation IDs 0-4 are valid everywhere; 5 (conv1x1) and 6 (conv3x3) only in
the head.
"""

import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import SearchSpaceError


# ============================================================================
# OPERATIONS
# ============================================================================

class OperationKind(IntEnum):
    """Unary operations; integer values are the token IDs"""
    SEP_CONV_3X3 = 0
    SEP_CONV_3X3_DIL3 = 1
    SEP_CONV_5X5_DIL6 = 2
    SKIP = 3
    DEFORM_CONV_3X3 = 4
    CONV_1X1 = 5
    CONV_3X3 = 6

    @property
    def short_name(self) -> str:
        return _OP_SHORT_NAMES[self]

    @property
    def fpn_valid(self) -> bool:
        return self <= OperationKind.DEFORM_CONV_3X3


_OP_SHORT_NAMES = {
    OperationKind.SEP_CONV_3X3: "sep3",
    OperationKind.SEP_CONV_3X3_DIL3: "sep3d3",
    OperationKind.SEP_CONV_5X5_DIL6: "sep5d6",
    OperationKind.SKIP: "skip",
    OperationKind.DEFORM_CONV_3X3: "dconv3",
    OperationKind.CONV_1X1: "conv1",
    OperationKind.CONV_3X3: "conv3",
}


class AggregationKind(IntEnum):
    SUM = 0
    CONCAT_PROJ = 1

    @property
    def short_name(self) -> str:
        return "sum" if self is AggregationKind.SUM else "cat"


class SearchStage(Enum):
    FPN_ONLY = "fpn"
    HEAD_ONLY = "head"
    JOINT = "joint"


# ============================================================================
# CONFIGURATIONS
# ============================================================================

@dataclass(frozen=True)
class BasicBlockConfig:
    """One FPN block: two pool indices, two unary ops, one aggregation"""
    id1: int
    id2: int
    op1: OperationKind
    op2: OperationKind
    agg: AggregationKind


@dataclass(frozen=True)
class FpnConfig:
    blocks: Tuple[BasicBlockConfig, ...]


@dataclass(frozen=True)
class HeadConfig:
    """
    Sequential head. Layer j (0-based) has per-level weights iff j < share_from.
    """
    ops: Tuple[OperationKind, ...]
    share_from: int

    def is_independent(self, layer: int) -> bool:
        return layer < self.share_from


@dataclass(frozen=True)
class DecoderConfig:
    fpn: FpnConfig
    head: HeadConfig


@dataclass(frozen=True)
class SpaceDims:
    """Dimensions of the grammar; the defaults are the full search space"""
    num_inputs: int = 3
    fpn_blocks: int = 7
    fpn_ops: int = 5
    aggregations: int = 2
    head_layers: int = 6
    head_ops: int = 7

    def pool_size(self, block: int) -> int:
        """Pool vocabulary for 1-based block t."""
        return self.num_inputs + block - 1

    @property
    def fpn_tokens(self) -> int:
        return 5 * self.fpn_blocks

    @property
    def head_tokens(self) -> int:
        return self.head_layers + 1


DEFAULT_DIMS = SpaceDims()
NUM_FPN_BLOCKS = DEFAULT_DIMS.fpn_blocks
NUM_HEAD_LAYERS = DEFAULT_DIMS.head_layers
FPN_TOKENS = DEFAULT_DIMS.fpn_tokens
HEAD_TOKENS = DEFAULT_DIMS.head_tokens
TOTAL_TOKENS = FPN_TOKENS + HEAD_TOKENS
INPUT_NAMES = ("c3", "c4", "c5")


@dataclass(frozen=True)
class ActionSpace:
    """Per-position vocabulary of one search stage"""
    stage: SearchStage
    vocab_sizes: Tuple[int, ...]
    offset: int  # first position within the full 42-token sequence

    def __len__(self) -> int:
        return len(self.vocab_sizes)


# ============================================================================
# ACTION SPACES
# ============================================================================

def _fpn_vocab(dims: SpaceDims) -> List[int]:
    vocab = []
    for t in range(1, dims.fpn_blocks + 1):
        pool = dims.pool_size(t)
        vocab.extend([pool, pool, dims.fpn_ops, dims.fpn_ops, dims.aggregations])
    return vocab


def _head_vocab(dims: SpaceDims) -> List[int]:
    return [dims.head_ops] * dims.head_layers + [dims.head_layers + 1]


def action_space(stage: SearchStage, dims: SpaceDims = DEFAULT_DIMS) -> ActionSpace:
    if stage is SearchStage.FPN_ONLY:
        return ActionSpace(stage, tuple(_fpn_vocab(dims)), 0)
    if stage is SearchStage.HEAD_ONLY:
        return ActionSpace(stage, tuple(_head_vocab(dims)), dims.fpn_tokens)
    return ActionSpace(stage, tuple(_fpn_vocab(dims) + _head_vocab(dims)), 0)


def space_size(stage: SearchStage, dims: SpaceDims = DEFAULT_DIMS) -> int:
    """Exact number of configurations in a stage's space."""
    return math.prod(action_space(stage, dims).vocab_sizes)


# ============================================================================
# VALIDATION
# ============================================================================

def validate_tokens(tokens: Sequence[int], space: ActionSpace) -> None:
    if len(tokens) != len(space.vocab_sizes):
        raise SearchSpaceError(
            f"Expected {len(space.vocab_sizes)} tokens for stage {space.stage.value}, got {len(tokens)}"
        )
    for position, (token, vocab) in enumerate(zip(tokens, space.vocab_sizes)):
        if not 0 <= int(token) < vocab:
            raise SearchSpaceError(
                f"Token {token} at position {position + space.offset} is outside vocab size {vocab}",
                position=position + space.offset, vocab_size=vocab,
            )


def validate_fpn(fpn: FpnConfig, dims: SpaceDims = DEFAULT_DIMS) -> None:
    if len(fpn.blocks) != dims.fpn_blocks:
        raise SearchSpaceError(f"FPN needs {dims.fpn_blocks} blocks, got {len(fpn.blocks)}")
    for t, block in enumerate(fpn.blocks, start=1):
        pool = dims.pool_size(t)
        for slot, field_name in enumerate(("id1", "id2")):
            index = getattr(block, field_name)
            if not 0 <= index < pool:
                raise SearchSpaceError(
                    f"Block {t} {field_name}={index} outside sampling pool of size {pool}",
                    position=5 * (t - 1) + slot, vocab_size=pool,
                )
        for slot, field_name in enumerate(("op1", "op2")):
            op = int(getattr(block, field_name))
            if not 0 <= op < dims.fpn_ops:
                raise SearchSpaceError(
                    f"Block {t} {field_name}={op} is not one of the {dims.fpn_ops} FPN operations",
                    position=5 * (t - 1) + 2 + slot, vocab_size=dims.fpn_ops,
                )
        if not 0 <= int(block.agg) < dims.aggregations:
            raise SearchSpaceError(f"Block {t} aggregation {block.agg} is invalid",
                                   position=5 * (t - 1) + 4, vocab_size=dims.aggregations)


def validate_head(head: HeadConfig, dims: SpaceDims = DEFAULT_DIMS) -> None:
    if len(head.ops) != dims.head_layers:
        raise SearchSpaceError(f"Head needs {dims.head_layers} ops, got {len(head.ops)}")
    for j, op in enumerate(head.ops):
        if not 0 <= int(op) < dims.head_ops:
            raise SearchSpaceError(f"Head layer {j} op {op} is invalid")
    if not 0 <= head.share_from <= dims.head_layers:
        raise SearchSpaceError(f"share_from={head.share_from} outside [0, {dims.head_layers}]")


def validate(config: DecoderConfig, dims: SpaceDims = DEFAULT_DIMS) -> None:
    validate_fpn(config.fpn, dims)
    validate_head(config.head, dims)


# ============================================================================
# ENCODING
# ============================================================================

def encode_fpn(fpn: FpnConfig) -> List[int]:
    validate_fpn(fpn)
    tokens = []
    for block in fpn.blocks:
        tokens.extend([block.id1, block.id2, int(block.op1), int(block.op2), int(block.agg)])
    return tokens


def encode_head(head: HeadConfig) -> List[int]:
    validate_head(head)
    return [int(op) for op in head.ops] + [head.share_from]


def encode(config: DecoderConfig) -> List[int]:
    return encode_fpn(config.fpn) + encode_head(config.head)


def decode_fpn(tokens: Sequence[int]) -> FpnConfig:
    validate_tokens(tokens, action_space(SearchStage.FPN_ONLY))
    blocks = []
    for t in range(NUM_FPN_BLOCKS):
        id1, id2, op1, op2, agg = (int(v) for v in tokens[5 * t:5 * t + 5])
        blocks.append(BasicBlockConfig(id1, id2, OperationKind(op1), OperationKind(op2), AggregationKind(agg)))
    return FpnConfig(tuple(blocks))


def decode_head(tokens: Sequence[int]) -> HeadConfig:
    validate_tokens(tokens, action_space(SearchStage.HEAD_ONLY))
    return HeadConfig(tuple(OperationKind(int(v)) for v in tokens[:-1]), int(tokens[-1]))


def decode(tokens: Sequence[int]) -> DecoderConfig:
    validate_tokens(tokens, action_space(SearchStage.JOINT))
    return DecoderConfig(decode_fpn(tokens[:FPN_TOKENS]), decode_head(tokens[FPN_TOKENS:]))


def stage_tokens(tokens: Sequence[int]) -> Tuple[List[int], List[int]]:
    """Split a full sequence into (FPN stage tokens, HEAD stage tokens)."""
    validate_tokens(tokens, action_space(SearchStage.JOINT))
    return list(tokens[:FPN_TOKENS]), list(tokens[FPN_TOKENS:])


def merge_stage_tokens(fpn_tokens: Sequence[int], head_tokens: Sequence[int]) -> List[int]:
    merged = list(fpn_tokens) + list(head_tokens)
    validate_tokens(merged, action_space(SearchStage.JOINT))
    return merged


def sample_uniform(seed: int, stage: SearchStage = SearchStage.JOINT) -> List[int]:
    """Uniformly random token sequence for a stage (random-search baseline)."""
    rng = np.random.default_rng(seed)
    return [int(rng.integers(vocab)) for vocab in action_space(stage).vocab_sizes]


def sample_uniform_config(seed: int) -> DecoderConfig:
    return decode(sample_uniform(seed))


# ============================================================================
# DANGLING LAYERS
# ============================================================================

def consumed_pool_indices(fpn: FpnConfig) -> Dict[int, List[int]]:
    """Map pool index -> 1-based blocks that read it."""
    readers: Dict[int, List[int]] = {}
    for t, block in enumerate(fpn.blocks, start=1):
        for index in sorted({block.id1, block.id2}):
            readers.setdefault(index, []).append(t)
    return readers


def dangling_blocks(fpn: FpnConfig, collected: int = 3) -> List[int]:
    """
    Blocks whose output is never read by a later block and is not one of the
    last `collected` outputs. Their outputs are added to every collected output.
    """
    readers = consumed_pool_indices(fpn)
    last_collected = len(fpn.blocks) - collected
    dangling = []
    for t in range(1, last_collected + 1):
        pool_index = len(INPUT_NAMES) + t - 1
        if not any(reader > t for reader in readers.get(pool_index, [])):
            dangling.append(t)
    return dangling


# ============================================================================
# PRETTY FORM
# ============================================================================

def pool_name(index: int) -> str:
    if index < len(INPUT_NAMES):
        return INPUT_NAMES[index]
    return f"x{index - len(INPUT_NAMES) + 1}"


def pretty_fpn(fpn: FpnConfig) -> str:
    return " ".join(
        f"bb{t}({pool_name(b.id1)},{pool_name(b.id2)}|{b.op1.short_name},{b.op2.short_name}|{b.agg.short_name})"
        for t, b in enumerate(fpn.blocks, start=1)
    )


def pretty_head(head: HeadConfig) -> str:
    return f"head[{','.join(op.short_name for op in head.ops)}] share={head.share_from}"


def pretty(config: DecoderConfig) -> str:
    return f"{pretty_fpn(config.fpn)} {pretty_head(config.head)}"


def pretty_tokens(tokens: Sequence[int], stage: SearchStage) -> str:
    if stage is SearchStage.FPN_ONLY:
        return pretty_fpn(decode_fpn(tokens))
    if stage is SearchStage.HEAD_ONLY:
        return pretty_head(decode_head(tokens))
    return pretty(decode(tokens))


# ============================================================================
# REFERENCE STRUCTURES
# ============================================================================

# Discovered head: two "deformable conv + 1x1 conv" pairs, two skips,
# first layer per-level.
REFERENCE_SEARCHED_HEAD = HeadConfig(
    ops=(
        OperationKind.DEFORM_CONV_3X3,
        OperationKind.CONV_1X1,
        OperationKind.SKIP,
        OperationKind.DEFORM_CONV_3X3,
        OperationKind.CONV_1X1,
        OperationKind.SKIP,
    ),
    share_from=1,
)
