"""Analytic multiply-accumulate counts for DeiT-shaped models with token fusion.

One MAC is reported as one FLOP. Layer norms, softmax, GELU and other
elementwise work are not counted.
"""
import csv
import io
from dataclasses import asdict, dataclass, field

from .vit import effective_r, token_schedule


def block_macs(n_tokens, channels, heads=1, mlp_ratio=4.0):
    """MACs of an unfused block at ``n_tokens``. ``heads`` does not change the count."""
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    attn, mlp = _block_parts(n_tokens, n_tokens, channels, mlp_ratio, "vanilla")
    return attn + mlp


def _block_parts(n_in, n_out, C, mlp_ratio, mode):
    """(attention MACs, MLP MACs) for a block fusing ``n_in`` down to ``n_out``."""
    mlp = int(round(2 * mlp_ratio * n_out * C * C))
    if mode == "vanilla" or n_in == n_out:
        attn = 3 * n_in * C * C + 2 * n_in * n_in * C + n_in * C * C
    elif mode == "approximated":
        # QKV and scores before fusion, aggregated map times fused values after
        attn = 3 * n_in * C * C + n_in * n_in * C + n_out * n_out * C + n_out * C * C
    elif mode == "precise":
        # Q/K scoring before fusion, then a full attention pass on fused tokens
        attn = (2 * n_in * C * C + n_in * n_in * C
                + 3 * n_out * C * C + 2 * n_out * n_out * C + n_out * C * C)
    else:
        raise ValueError(f"unknown attention mode {mode!r}")
    return attn, mlp


def fusion_overhead_macs(n_in, n_out, C, heads, cls_present=True):
    """Extra work of a reduction: attraction matrix, pooling, attention aggregation."""
    if n_in == n_out:
        return 0
    fusible = n_in - (1 if cls_present else 0)
    n_src, n_tgt = (fusible + 1) // 2, fusible // 2
    attraction = n_src * n_tgt * C
    pooling = 2 * n_in * C
    aggregation = heads * n_in * n_in
    return attraction + pooling + aggregation


@dataclass
class FlopsReport:
    per_layer: list
    stem_macs: int
    head_macs: int
    total_macs: int
    baseline_total_macs: int
    reduction_percent: float
    attention_mode: str = "approximated"
    include_overhead: bool = False
    overhead_macs: int = 0
    final_tokens: int = 0
    r: int = 0

    @property
    def schedule(self):
        return [row["tokens_in"] for row in self.per_layer]

    @property
    def gmacs(self):
        return self.total_macs / 1e9

    def to_dict(self):
        return asdict(self)

    def to_csv(self):
        buf = io.StringIO()
        cols = ["block", "tokens_in", "tokens_out", "attention_macs", "mlp_macs",
                "mctf_overhead_macs"]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for i, row in enumerate(self.per_layer):
            writer.writerow({"block": i, **row})
        return buf.getvalue()


def _model_total(config, entering, final, mode, include_overhead):
    C = config.embed_dim
    stem = config.n_patches * config.in_chans * config.patch_size ** 2 * C
    head = C * config.num_classes
    outs = list(entering[1:]) + [final]
    rows, body, overhead = [], 0, 0
    for n_in, n_out in zip(entering, outs):
        attn, mlp = _block_parts(n_in, n_out, C, config.mlp_ratio, mode)
        extra = fusion_overhead_macs(n_in, n_out, C, config.heads)
        rows.append({
            "tokens_in": n_in,
            "tokens_out": n_out,
            "attention_macs": attn,
            "mlp_macs": mlp,
            "mctf_overhead_macs": extra,
        })
        body += attn + mlp
        overhead += extra
    total = stem + body + head + (overhead if include_overhead else 0)
    return rows, stem, head, total, overhead


def model_macs(config, schedule=None, include_overhead=False, final_tokens=None, r=None):
    """Account MACs for ``config`` over a per-block token schedule.

    ``schedule`` lists the token counts entering each block; by default it is
    derived from ``config`` (and ``r``, if given). The final count, needed
    for the last block's output, defaults to applying the config's
    reduction rule to the last block.
    """
    r = config.r_per_layer if r is None else r
    if schedule is None:
        schedule, computed_final = token_schedule(config, r)
        final_tokens = computed_final if final_tokens is None else final_tokens
    schedule = [int(n) for n in schedule]
    if len(schedule) != config.depth:
        raise ValueError(f"schedule has {len(schedule)} entries for depth {config.depth}")
    if final_tokens is None:
        last = schedule[-1]
        final_tokens = last - effective_r(last, r, config, config.depth - 1)
    mode = config.attention_mode
    rows, stem, head, total, overhead = _model_total(
        config, schedule, final_tokens, mode, include_overhead)
    base_sched, base_final = token_schedule(config, 0)
    _, _, _, baseline, _ = _model_total(config, base_sched, base_final, mode, include_overhead)
    return FlopsReport(
        per_layer=rows,
        stem_macs=stem,
        head_macs=head,
        total_macs=total,
        baseline_total_macs=baseline,
        reduction_percent=100.0 * (1.0 - total / baseline),
        attention_mode=mode,
        include_overhead=include_overhead,
        overhead_macs=overhead,
        final_tokens=final_tokens,
        r=r,
    )


def flops_table(config, r_values, include_overhead=False):
    """One summary row per ``r``: total MACs, GMACs and reduction percent."""
    rows = []
    for r in r_values:
        rep = model_macs(config, r=r, include_overhead=include_overhead)
        rows.append({
            "r": r,
            "total_macs": rep.total_macs,
            "gmacs": round(rep.gmacs, 4),
            "reduction_percent": round(rep.reduction_percent, 4),
            "final_tokens": rep.final_tokens,
        })
    return rows
