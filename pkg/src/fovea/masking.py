"""Masked token batches with count-biased attention.

One learnable mask token stands in for any number of removed (or padded)
tokens. Instead of materializing the copies, their count n_m enters the
attention logits as an additive log(n_m) bias on the mask column, which
is exactly equivalent to repeating the mask key/value n_m times. The
brute-force duplication form is kept alongside as the oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "TokenRow",
    "TokenBatch",
    "MaskSampler",
    "sample_keep_count",
    "keep_count_expectation",
    "apply_masking",
    "scaled_attention",
    "duplication_oracle",
    "adjust_batch_and_lr",
    "attention_bias",
    "attention_stage_flops",
    "benchmark_attention",
]


@dataclass
class TokenRow:
    """One image's kept tokens plus mask bookkeeping, before batching."""

    tokens: Tensor  # [kept, D]
    kept_indices: np.ndarray  # positions into the image's full token order
    total_count: int  # n_i
    masked_count: int  # tokens removed by masking (0 when only padding)


@dataclass
class TokenBatch:
    """Rectangular [B, L+1, D] token tensor with per-image mask counts.

    Columns [0, valid_counts[b]) hold image b's kept tokens, column L is
    the single mask slot carrying the learnable mask token, and any
    columns between are inert filler (excluded from attention). The mask
    slot represents mask_counts[b] identical tokens; 0 means the slot is
    excluded entirely.
    """

    tokens: Tensor  # [B, L+1, D]
    valid_counts: np.ndarray  # kept per image (n_k)
    mask_counts: np.ndarray  # effective mask-token repeats per image (n_m)
    total_counts: np.ndarray  # n_i per image
    kept_indices: list  # per-image index arrays into tokenization order

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    @property
    def slot_count(self) -> int:
        """Physical sequence length including the mask slot."""
        return self.tokens.shape[1]


# ---------------------------------------------------------------------------
# keep-count sampling


@dataclass(frozen=True)
class MaskSampler:
    """Exponential-decay sampler for the number of tokens to keep.

    Draws concentrate near n_k_min and decay toward n_i_max with rate
    lam; keep_cap, when set, clamps the upper end.
    """

    n_k_min: int
    n_i_max: int
    lam: float
    keep_cap: int | None = None

    def __post_init__(self):
        if not 1 <= self.n_k_min <= self.n_i_max:
            raise ValueError("need 1 <= n_k_min <= n_i_max")
        if self.lam <= 0:
            raise ValueError("decay rate must be positive")


def sample_keep_count(s: MaskSampler, u: float) -> int:
    """Keep count for one uniform draw u in [0, 1)."""
    if not 0.0 <= u < 1.0:
        raise ValueError(f"u must be in [0, 1), got {u}")
    value = s.n_k_min + (s.n_i_max - s.n_k_min) * np.exp(-s.lam * u)
    n = int(np.floor(value))
    if s.keep_cap is not None:
        n = min(n, s.keep_cap)
    return n


def keep_count_expectation(s: MaskSampler) -> float:
    """Closed-form mean of the pre-floor, pre-cap keep count."""
    span = s.n_i_max - s.n_k_min
    return s.n_k_min + span * (1.0 - np.exp(-s.lam)) / s.lam


# ---------------------------------------------------------------------------
# masking


def apply_masking(
    tokens: Tensor, n_keep: int, mask_token, rng: np.random.Generator
) -> TokenRow:
    """Keep a uniform random subset of n_keep tokens, in original order.

    The returned row carries the kept tokens only; the mask slot is added
    at batch assembly. mask_token is unused here but validated against
    the token width so misconfiguration fails early.
    """
    n_total, dim = tokens.shape
    if not 1 <= n_keep <= n_total:
        raise ValueError(f"n_keep {n_keep} outside [1, {n_total}]")
    mask_vec = mask_token.tensor if hasattr(mask_token, "tensor") else mask_token
    if mask_vec.shape[-1] != dim:
        raise ValueError(
            f"mask token width {mask_vec.shape[-1]} does not match token dim {dim}"
        )
    kept = np.sort(rng.choice(n_total, size=n_keep, replace=False))
    return TokenRow(
        tokens=T.take_rows(tokens, kept),
        kept_indices=kept,
        total_count=n_total,
        masked_count=n_total - n_keep,
    )


def attention_bias(batch: TokenBatch) -> np.ndarray:
    """[B, 1, 1, L+1] additive logit bias implementing the mask counts.

    0 on kept columns; log(n_m) on the mask column; -inf on the mask
    column when n_m = 0 and on inert filler columns. -inf is the exact
    exclusion sentinel understood by softmax_with_bias.
    """
    b, slots, _ = batch.tokens.shape
    bias = np.zeros((b, 1, 1, slots))
    for i in range(b):
        v = int(batch.valid_counts[i])
        m = int(batch.mask_counts[i])
        bias[i, :, :, v : slots - 1] = -np.inf
        bias[i, :, :, slots - 1] = np.log(m) if m > 0 else -np.inf
    return bias


# ---------------------------------------------------------------------------
# attention


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, n_m: int) -> Tensor:
    """Single-sequence attention where the last row is the mask slot.

    Computes softmax(q k^T / sqrt(d) + delta) v with delta = log(n_m) on
    the mask column (column excluded when n_m = 0), reproducing attention
    over the kept tokens plus n_m copies of the mask token.
    """
    if n_m < 0:
        raise ValueError("mask count must be >= 0")
    d = q.shape[-1]
    logits = T.matmul(q, T.transpose(k)) * (1.0 / np.sqrt(d))
    bias = np.zeros(k.shape[0])
    bias[-1] = np.log(n_m) if n_m > 0 else -np.inf
    weights = T.softmax_with_bias(logits, bias)
    return T.matmul(weights, v)


def duplication_oracle(q: Tensor, k: Tensor, v: Tensor, n_m: int) -> Tensor:
    """Reference form: physically repeat the mask key/value n_m times.

    Runs unbiased attention over kept keys plus the duplicated mask rows
    and returns outputs for the original (non-duplicated) query rows.
    Test/benchmark use only.
    """
    if n_m < 0:
        raise ValueError("mask count must be >= 0")
    kept_k = T.take_rows(k, np.arange(k.shape[0] - 1))
    kept_v = T.take_rows(v, np.arange(v.shape[0] - 1))
    if n_m > 0:
        mask_rows = np.full(n_m, k.shape[0] - 1)
        k_full = T.concat([kept_k, T.take_rows(k, mask_rows)], axis=0)
        v_full = T.concat([kept_v, T.take_rows(v, mask_rows)], axis=0)
    else:
        k_full, v_full = kept_k, kept_v
    d = q.shape[-1]
    logits = T.matmul(q, T.transpose(k_full)) * (1.0 / np.sqrt(d))
    weights = T.softmax_with_bias(logits)
    return T.matmul(weights, v_full)


# ---------------------------------------------------------------------------
# budget compensation


def adjust_batch_and_lr(
    n_keep: int, base_n_k: int, base_batch: int, base_lr: float
) -> tuple[int, float]:
    """Quadratic batch-size and linear learning-rate compensation.

    Attention cost grows ~ n^2, so the batch shrinks by (base/n)^2 to
    hold the per-step budget, and the learning rate scales with the
    effective batch to keep per-sample gradient magnitudes consistent.
    """
    if min(n_keep, base_n_k, base_batch) < 1 or base_lr <= 0:
        raise ValueError("all adjustment inputs must be positive")
    batch = max(1, int(np.floor(base_batch * (base_n_k**2) / (n_keep**2))))
    lr = base_lr * batch / base_batch
    return batch, lr


# ---------------------------------------------------------------------------
# cost model and measurement


def attention_stage_flops(seq_len: int, dim: int, heads: int = 1) -> float:
    """Counted FLOPs of one layer's softmax-attention stage.

    Covers the quadratic terms only (logits q k^T, softmax, weights @ v);
    the linear q/k/v/output projections are the same for masked and full
    stacks per token and are excluded deliberately.
    """
    d_head = dim // heads
    n2 = float(seq_len) * seq_len
    per_head = 2.0 * n2 * d_head + 5.0 * n2 + 2.0 * n2 * d_head
    return heads * per_head


def benchmark_attention(
    total_tokens: int,
    keep_ratio: float,
    dim: int,
    depth: int,
    reps: int,
    seed: int = 0,
) -> dict:
    """Wall-clock and counted-FLOP comparison of full vs masked attention.

    Full runs over total_tokens; masked keeps floor(ratio * total) tokens
    plus one mask slot carrying the rest. Reports the median over reps of
    the summed per-depth attention-stage time, in microseconds.
    """
    import time

    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError("keep ratio must be in (0, 1]")
    rng = np.random.default_rng(seed)
    kept = max(1, int(np.floor(total_tokens * keep_ratio)))
    masked_len = kept + 1
    n_m = total_tokens - kept

    def run(n: int, mask_count: int | None) -> float:
        q = Tensor(rng.standard_normal((n, dim)))
        k = Tensor(rng.standard_normal((n, dim)))
        v = Tensor(rng.standard_normal((n, dim)))
        scale = 1.0 / np.sqrt(dim)
        times = []
        with T.no_grad():
            for _ in range(reps):
                t0 = time.perf_counter()
                for _ in range(depth):
                    if mask_count is None:  # plain full-token attention
                        w = T.softmax_with_bias(T.matmul(q, T.transpose(k)) * scale)
                        T.matmul(w, v)
                    else:
                        scaled_attention(q, k, v, mask_count)
                times.append(time.perf_counter() - t0)
        return float(np.median(times)) * 1e6

    wallclock_full = run(total_tokens, None)
    wallclock_masked = run(masked_len, n_m)
    flops_full = depth * attention_stage_flops(total_tokens, dim)
    flops_masked = depth * attention_stage_flops(masked_len, dim)
    return {
        "kept_tokens": kept,
        "total_tokens": total_tokens,
        "flops_full": flops_full,
        "flops_masked": flops_masked,
        "wallclock_full_us": wallclock_full,
        "wallclock_masked_us": wallclock_masked,
        "flop_ratio": flops_full / flops_masked,
        "wallclock_ratio": wallclock_full / wallclock_masked,
    }
