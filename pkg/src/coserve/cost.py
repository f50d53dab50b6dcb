"""Unified cost accounting.

Server usage is billed in dollars per token from a pricing table; device
usage is billed in FLOPs from a per-token transformer calculator and
converted to dollars by an exchange rate (dollars per million FLOPs).  The
FLOPs calculator counts multiply-accumulates per token:

  attention (prefill):  n_layers * (3*d^2 + L^2*d/n_heads + L*d + d^2)
  attention (decode):   n_layers * (3*d^2 + L*d/n_heads   + L*d + d^2)
  ffn:                  n_layers * 2*d*d_ffn
  layernorm:            n_layers * 2*(2*d)
  embedding = output:   d * vocab

Decode eliminates the quadratic attention term thanks to KV caching, so
decode cost is affine in context length and dominated by the embedding and
output projections for small models.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

__all__ = [
    "Phase",
    "Constrained",
    "ModelArch",
    "CostRates",
    "BudgetSpec",
    "ARCH_PRESETS",
    "DEVICE_PRESETS",
    "PRICING_USD_PER_MTOK",
    "DEFAULT_LAMBDA_SERVER_CONSTRAINED",
    "DEFAULT_LAMBDA_DEVICE_CONSTRAINED",
    "DEFAULT_GENERATION_CAP",
    "flops_attention_prefill",
    "flops_attention_decode",
    "flops_per_token_total",
    "flops_components",
    "flops_prefill_request",
    "flops_decode_span",
    "unified_request_cost",
    "get_pricing",
    "rates_from_configs",
    "compare_reference",
]


class Phase(Enum):
    PREFILL = "prefill"
    DECODE = "decode"


class Constrained(Enum):
    """Which endpoint's budget binds."""

    DEVICE = "device"
    SERVER = "server"


@dataclass(frozen=True)
class ModelArch:
    n_layers: int
    d_model: int
    n_heads: int
    d_ffn: int
    vocab: int

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ffn", "vocab"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")


# 24-layer small on-device models.  Vocabulary sizes are the published
# tokenizer sizes for each family (the BLOOM models share one tokenizer).
ARCH_PRESETS: dict[str, ModelArch] = {
    "bloom-1.1b": ModelArch(n_layers=24, d_model=1024, n_heads=16, d_ffn=4096, vocab=250880),
    "bloom-560m": ModelArch(n_layers=24, d_model=512, n_heads=8, d_ffn=2048, vocab=250880),
    "qwen1.5-0.5b": ModelArch(n_layers=24, d_model=768, n_heads=12, d_ffn=2048, vocab=151936),
}

# Measured phone prefill/decode speeds (tokens/s) for the preset models.
DEVICE_PRESETS: dict[str, dict] = {
    "pixel7pro-bloom-1.1b": {"arch": "bloom-1.1b", "prefill_tok_s": 31.32, "decode_tok_s": 13.93},
    "pixel7pro-bloom-560m": {"arch": "bloom-560m", "prefill_tok_s": 51.80, "decode_tok_s": 20.14},
    "xiaomi14-qwen1.5-0.5b": {"arch": "qwen1.5-0.5b", "prefill_tok_s": 79.90, "decode_tok_s": 21.47},
}

# Public streaming-API prices, USD per million tokens (input, output).
PRICING_USD_PER_MTOK: list[dict] = [
    {"model": "DeepSeek-V2.5", "vendor": "DeepSeek", "input_per_mtok": 0.14, "output_per_mtok": 0.28},
    {"model": "GPT-4o-mini", "vendor": "OpenAI", "input_per_mtok": 0.15, "output_per_mtok": 0.60},
    {"model": "LLaMa-3.1-70b", "vendor": "Hyperbolic", "input_per_mtok": 0.40, "output_per_mtok": 0.40},
    {"model": "LLaMa-3.1-70b-Amazon", "vendor": "Amazon", "input_per_mtok": 0.99, "output_per_mtok": 0.99},
    {"model": "Command", "vendor": "Cohere", "input_per_mtok": 1.25, "output_per_mtok": 2.00},
    {"model": "GPT-4o", "vendor": "OpenAI", "input_per_mtok": 2.50, "output_per_mtok": 10.0},
    {"model": "Claude-3.5-Sonnet", "vendor": "Anthropic", "input_per_mtok": 3.00, "output_per_mtok": 15.0},
    {"model": "o1-preview", "vendor": "OpenAI", "input_per_mtok": 15.0, "output_per_mtok": 60.0},
]

# Default exchange rates, dollars per million FLOPs, by experiment family.
DEFAULT_LAMBDA_SERVER_CONSTRAINED = 0.3
DEFAULT_LAMBDA_DEVICE_CONSTRAINED = 5.0

DEFAULT_GENERATION_CAP = 128


def flops_attention_prefill(arch: ModelArch, L: int) -> int:
    """Per-token attention MACs at prompt length L during prefill (exact int)."""
    if L < 1:
        raise ValueError("L must be >= 1")
    d = arch.d_model
    return arch.n_layers * (3 * d * d + L * L * (d // arch.n_heads) + L * d + d * d)


def flops_attention_decode(arch: ModelArch, L: int) -> int:
    """Per-token attention MACs at context length L during decode (exact int)."""
    if L < 1:
        raise ValueError("L must be >= 1")
    d = arch.d_model
    return arch.n_layers * (3 * d * d + L * (d // arch.n_heads) + L * d + d * d)


def flops_components(arch: ModelArch, L: int, phase: Phase) -> dict[str, int]:
    """Per-token FLOPs broken down by component."""
    attn = flops_attention_prefill(arch, L) if phase is Phase.PREFILL else flops_attention_decode(arch, L)
    d = arch.d_model
    return {
        "attention": attn,
        "ffn": arch.n_layers * 2 * d * arch.d_ffn,
        "layernorm": arch.n_layers * 2 * (2 * d),
        "embedding": d * arch.vocab,
        "output": d * arch.vocab,
    }


def flops_per_token_total(arch: ModelArch, L: int, phase: Phase) -> int:
    """Total per-token FLOPs at sequence/context length L."""
    return sum(flops_components(arch, L, phase).values())


def flops_prefill_request(arch: ModelArch, prompt_len: int) -> int:
    """FLOPs to prefill a whole prompt: prompt_len tokens at the per-token
    prefill cost evaluated at L = prompt_len."""
    return prompt_len * flops_per_token_total(arch, prompt_len, Phase.PREFILL)


def flops_decode_span(arch: ModelArch, context_start: int, n_tokens: int) -> int:
    """Exact FLOPs to decode ``n_tokens`` tokens starting at context length
    ``context_start`` (context grows by one per token).

    Decode cost is affine in context length, so the sum has a closed form.
    """
    if n_tokens <= 0:
        return 0
    if context_start < 1:
        raise ValueError("context_start must be >= 1")
    d = arch.d_model
    slope = arch.n_layers * (d // arch.n_heads + d)  # dFLOPs per unit context
    base = flops_per_token_total(arch, 1, Phase.DECODE) - slope  # L-independent part
    sum_L = n_tokens * context_start + n_tokens * (n_tokens - 1) // 2
    return n_tokens * base + slope * sum_L


def unified_request_cost(
    rates: "CostRates",
    server_prefill_toks: float,
    server_decode_toks: float,
    device_prefill_flops: float,
    device_decode_flops: float,
) -> float:
    """Dollar cost of one request's resource usage on both endpoints."""
    if min(server_prefill_toks, server_decode_toks, device_prefill_flops, device_decode_flops) < 0:
        raise ValueError("usage counts must be >= 0")
    return (
        rates.server_prefill * server_prefill_toks
        + rates.server_decode * server_decode_toks
        + rates.lambda_per_mflop * (device_prefill_flops + device_decode_flops) / 1e6
    )


@dataclass(frozen=True)
class CostRates:
    """Per-token costs on both endpoints plus the energy exchange rate.

    Server rates are dollars per token.  Device rates are FLOPs per token
    (constant-rate approximation used by the policy math); they convert to
    dollars through ``lambda_per_mflop``.
    """

    server_prefill: float  # $/token
    server_decode: float  # $/token
    device_prefill_flops: float  # FLOPs/token
    device_decode_flops: float  # FLOPs/token
    lambda_per_mflop: float  # $/MFLOP

    def __post_init__(self):
        for name in ("server_prefill", "server_decode", "device_prefill_flops",
                     "device_decode_flops", "lambda_per_mflop"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def device_prefill_usd(self) -> float:
        return self.device_prefill_flops * self.lambda_per_mflop / 1e6

    def device_decode_usd(self) -> float:
        return self.device_decode_flops * self.lambda_per_mflop / 1e6

    def to_dict(self) -> dict:
        return {
            "server_prefill_per_tok": self.server_prefill,
            "server_decode_per_tok": self.server_decode,
            "device_prefill_flops_per_tok": self.device_prefill_flops,
            "device_decode_flops_per_tok": self.device_decode_flops,
            "lambda_per_mflop": self.lambda_per_mflop,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "CostRates":
        return cls(
            server_prefill=float(raw["server_prefill_per_tok"]),
            server_decode=float(raw["server_decode_per_tok"]),
            device_prefill_flops=float(raw["device_prefill_flops_per_tok"]),
            device_decode_flops=float(raw["device_decode_flops_per_tok"]),
            lambda_per_mflop=float(raw["lambda_per_mflop"]),
        )


@dataclass(frozen=True)
class BudgetSpec:
    """Budget ratio b for the constrained endpoint plus the tail reserve."""

    b: float
    alpha: float = 0.05
    constrained: Constrained = Constrained.DEVICE

    def __post_init__(self):
        if not 0.0 <= self.b <= 1.0:
            raise ValueError(f"b must be in [0, 1], got {self.b}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")


def get_pricing(model: str) -> dict:
    for entry in PRICING_USD_PER_MTOK:
        if entry["model"] == model:
            return entry
    raise KeyError(f"no pricing entry for model {model!r}")


def rates_from_configs(
    pricing: str | dict,
    arch: str | ModelArch,
    lambda_per_mflop: float,
    context_len: int = DEFAULT_GENERATION_CAP,
) -> CostRates:
    """Build constant-rate costs from a pricing entry and an architecture.

    Device per-token FLOPs are evaluated at a representative context length
    (the generation cap by default); the full calculator remains available
    for exact per-request ledgers.
    """
    entry = get_pricing(pricing) if isinstance(pricing, str) else pricing
    model = ARCH_PRESETS[arch] if isinstance(arch, str) else arch
    return CostRates(
        server_prefill=float(entry["input_per_mtok"]) / 1e6,
        server_decode=float(entry["output_per_mtok"]) / 1e6,
        device_prefill_flops=float(flops_per_token_total(model, context_len, Phase.PREFILL)),
        device_decode_flops=float(flops_per_token_total(model, context_len, Phase.DECODE)),
        lambda_per_mflop=lambda_per_mflop,
    )


def compare_reference(computed: dict[str, float], reference: dict[str, float],
                      rel_tol: float = 0.15) -> list[dict]:
    """Compare computed values against reference figures, flagging deviations.

    Returns one row per key with the relative error and a ``flagged`` bit for
    deviations beyond ``rel_tol``.  Used by reports to surface disagreement
    with published figures instead of forcing agreement.
    """
    rows = []
    for key in sorted(reference):
        ref = reference[key]
        got = computed[key]
        rel = (got - ref) / ref if ref else float("inf")
        rows.append({
            "key": key,
            "computed": got,
            "reference": ref,
            "rel_err": rel,
            "flagged": abs(rel) > rel_tol,
        })
    return rows
