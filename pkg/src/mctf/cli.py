"""Command-line entry point: ``mctf {forward,flops,oracle-check,viz,trace}``."""
import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import weightfile
from .criteria import CriteriaTemperatures, TokenState
from .flops import flops_table, model_macs
from .images import read_pnm
from .matching import brute_force_match, bipartite_soft_match
from .viz import group_svg, patch_assignment
from .vit import ModelWeights, model_forward, patch_embed, preset, random_image

EXIT_USAGE = 2

ATTENTION_FLAGS = {"approx": "approximated", "precise": "precise"}
MATCHING_FLAGS = {"bi": "bidirectional", "oneway": "one_way"}
POOLING_FLAGS = {"weighted": "weighted", "avg": "average", "max": "max"}


class CliError(Exception):
    pass


def _parse_sweep(text):
    try:
        lo, hi = text.split("..")
        lo, hi = int(lo), int(hi)
    except ValueError:
        raise CliError(f"--sweep expects A..B, got {text!r}") from None
    if lo < 0 or hi < lo:
        raise CliError(f"invalid sweep range {text!r}")
    return list(range(lo, hi + 1))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its keys")
    common.add_argument("--preset", choices=["deit-t", "deit-s", "deit-b"])
    common.add_argument("--r", type=int, help="tokens fused per block")
    common.add_argument("--sweep", help="inclusive r range A..B")
    common.add_argument("--seed", type=int)
    common.add_argument("--attention", choices=sorted(ATTENTION_FLAGS))
    common.add_argument("--matching", choices=sorted(MATCHING_FLAGS))
    common.add_argument("--pooling", choices=sorted(POOLING_FLAGS))
    common.add_argument("--criteria", choices=["s", "si", "sis"])
    common.add_argument("--fusion-start", dest="fusion_start", type=int,
                        help="first block that fuses tokens (0 fuses from the first block)")
    common.add_argument("--weights", help="MCTF weight file (default: seeded random)")
    common.add_argument("--input", help="PPM/PGM image or MCTF tensor file (default: seeded random image)")
    common.add_argument("--out", help="output path (default: stdout)")

    parser = argparse.ArgumentParser(prog="mctf", description="Token fusion for DeiT-shaped vision transformers")
    sub = parser.add_subparsers(dest="command", required=True)
    fwd = sub.add_parser("forward", parents=[common], help="run one forward pass")
    fwd.add_argument("--timing", action="store_true", help="include wall-clock timing (breaks byte-determinism)")
    fl = sub.add_parser("flops", parents=[common], help="MAC table over a sweep of r")
    fl.add_argument("--csv", help="CSV path (default: --out with .csv suffix)")
    fl.add_argument("--include-overhead", action="store_true")
    oc = sub.add_parser("oracle-check", parents=[common], help="greedy vs brute-force matching")
    oc.add_argument("--count", type=int, default=500)
    vz = sub.add_parser("viz", parents=[common], help="SVG map of fused patches")
    vz.add_argument("--layer", type=int, help="block index (default: last)")
    sub.add_parser("trace", parents=[common], help="per-block fusion trace as JSON")
    return parser


def resolve(args):
    """Merge the JSON config with flag overrides into a plain settings dict."""
    settings = {
        "preset": "deit-s", "r": 0, "sweep": None, "seed": 0,
        "attention": "approx", "matching": "bi", "pooling": "weighted", "criteria": "sis",
        "fusion_start": None, "weights": None, "input": None, "out": None, "model": None,
    }
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"malformed config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise CliError(f"config {path} must be a JSON object")
        unknown = set(doc) - set(settings)
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
        settings.update(doc)
    for key in ("preset", "r", "sweep", "seed", "attention", "matching", "pooling",
                "criteria", "fusion_start", "weights", "input", "out"):
        val = getattr(args, key, None)
        if val is not None:
            settings[key] = val
    for key, table in (("attention", ATTENTION_FLAGS), ("matching", MATCHING_FLAGS),
                       ("pooling", POOLING_FLAGS)):
        if settings[key] not in table:
            raise CliError(f"invalid {key} {settings[key]!r}")
    if settings["r"] < 0:
        raise CliError("--r must be non-negative")
    return settings


def make_config(settings):
    """Preset, then the config's ``model`` overrides, then mode flags.

    ``--criteria`` picks which terms are on; temperatures come from ``model.temps``
    when given.
    """
    overrides = settings["model"] or {}
    if not isinstance(overrides, dict):
        raise CliError("config key 'model' must be an object")
    overrides = dict(overrides)
    if settings["fusion_start"] is not None:
        overrides["fusion_start_block"] = settings["fusion_start"]
    try:
        taus = CriteriaTemperatures(**overrides.pop("temps", {}))
        temps = CriteriaTemperatures.from_code(
            settings["criteria"], tau_sim=taus.tau_sim, tau_info=taus.tau_info, tau_size=taus.tau_size)
        return preset(settings["preset"], **overrides).with_(
            r_per_layer=settings["r"],
            attention_mode=ATTENTION_FLAGS[settings["attention"]],
            matching_mode=MATCHING_FLAGS[settings["matching"]],
            pooling_mode=POOLING_FLAGS[settings["pooling"]],
            temps=temps,
        )
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid model config: {exc}") from None


def load_weights(settings, config):
    path = settings["weights"]
    if path is None:
        return ModelWeights.random(config, seed=settings["seed"]), f"seeded-random:{settings['seed']}"
    if not Path(path).is_file():
        raise CliError(f"weight file not found: {path}")
    try:
        return ModelWeights.load(path, config), str(path)
    except ValueError as exc:
        raise CliError(f"cannot load weights from {path}: {exc}") from None


def load_input(settings, config):
    """Returns (kind, array, description) with kind 'image' or 'tokens'."""
    path = settings["input"]
    if path is None:
        return "image", random_image(config, settings["seed"]), f"seeded-random:{settings['seed']}"
    p = Path(path)
    if not p.is_file():
        raise CliError(f"input file not found: {p}")
    try:
        if p.suffix.lower() in (".ppm", ".pgm", ".pnm"):
            return "image", read_pnm(p), str(p)
        tensors = weightfile.load(p)
    except ValueError as exc:
        raise CliError(f"cannot read input {p}: {exc}") from None
    if "image" in tensors:
        return "image", tensors["image"], str(p)
    if "tokens" in tensors:
        return "tokens", tensors["tokens"], str(p)
    raise CliError(f"input tensor file {p} has neither an 'image' nor a 'tokens' tensor")


def _tokens(kind, data, weights, config):
    if kind == "image":
        try:
            return patch_embed(data, weights, config)
        except ValueError as exc:
            raise CliError(str(exc)) from None
    return TokenState.fresh(data, cls_present=True)


def _emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _floats(arr):
    return [float(x) for x in np.asarray(arr).tolist()]


def cmd_forward(args, settings):
    config = make_config(settings)
    weights, wdesc = load_weights(settings, config)
    kind, data, idesc = load_input(settings, config)
    tokens = _tokens(kind, data, weights, config)
    t0 = time.perf_counter()
    logits, trace = model_forward(tokens, weights, config)
    elapsed = (time.perf_counter() - t0) * 1000.0
    rep = model_macs(config, schedule=trace.tokens_in, final_tokens=trace.final_tokens)
    report = {
        "command": "forward",
        "config": config.to_dict(),
        "seed": settings["seed"],
        "weights": wdesc,
        "input": idesc,
        "tokens_in": trace.tokens_in,
        "tokens_out": trace.tokens_out,
        "final_tokens": trace.final_tokens,
        "logits": _floats(logits),
        "top1": int(np.argmax(logits)),
        "timing_ms": round(elapsed, 3) if args.timing else None,
        "flops": _flops_summary(rep),
    }
    _emit(_dump(report), settings["out"])
    return 0


def _flops_summary(rep):
    return {
        "total_macs": rep.total_macs,
        "baseline_total_macs": rep.baseline_total_macs,
        "gmacs": round(rep.gmacs, 6),
        "reduction_percent": round(rep.reduction_percent, 6),
        "overhead_macs": rep.overhead_macs,
    }


def sweep_threads():
    try:
        return max(1, int(os.environ.get("MCTF_THREADS", "4")))
    except ValueError:
        return 1


def cmd_flops(args, settings):
    config = make_config(settings)
    r_values = _parse_sweep(settings["sweep"]) if settings["sweep"] else [settings["r"]]
    with ThreadPoolExecutor(max_workers=sweep_threads()) as pool:
        parts = list(pool.map(
            lambda r: flops_table(config, [r], include_overhead=args.include_overhead)[0],
            r_values))
    report = {
        "command": "flops",
        "preset": settings["preset"],
        "config": config.to_dict(),
        "include_overhead": bool(args.include_overhead),
        "rows": parts,
    }
    _emit(_dump(report), settings["out"])
    csv_path = args.csv or (str(Path(settings["out"]).with_suffix(".csv")) if settings["out"] else None)
    if csv_path:
        lines = ["r,total_macs,gmacs,reduction_percent,final_tokens"]
        lines += [f"{p['r']},{p['total_macs']},{p['gmacs']:.4f},{p['reduction_percent']:.4f},{p['final_tokens']}"
                  for p in parts]
        Path(csv_path).write_text("\n".join(lines) + "\n")
    return 0


def random_instance(rng, max_dim=7):
    n_src = int(rng.integers(1, max_dim + 1))
    n_tgt = int(rng.integers(1, max_dim + 1))
    # uniform on (0, 1]
    w = 1.0 - rng.random((n_src, n_tgt))
    r = int(rng.integers(0, n_src + 1))
    return w, r


def run_oracle_check(seed, count, solver=None, oracle=None, stream=None):
    """Compare ``solver`` (greedy by default) against the exhaustive oracle.

    Returns the number of failing instances; each failure is dumped as JSON.
    """
    solver = solver or bipartite_soft_match
    oracle = oracle or brute_force_match
    stream = stream or sys.stdout
    rng = np.random.default_rng(seed)
    failures = 0
    for k in range(count):
        w, r = random_instance(rng)
        got, want = solver(w, r), oracle(w, r)
        if got.objective != want.objective or len(got.edges) != min(r, w.shape[0]):
            failures += 1
            stream.write(_dump({
                "instance": k, "r": r, "weights": w.tolist(),
                "greedy": got.to_dict(), "brute_force": want.to_dict(),
            }))
    stream.write(f"oracle-check: {count - failures}/{count} passed (seed {seed})\n")
    return failures


def cmd_oracle_check(args, settings):
    if args.count < 0:
        raise CliError("--count must be non-negative")
    failures = run_oracle_check(settings["seed"], args.count)
    return 0 if failures == 0 else 1


def cmd_viz(args, settings):
    config = make_config(settings)
    weights, _ = load_weights(settings, config)
    kind, data, idesc = load_input(settings, config)
    if kind != "image":
        raise CliError("viz requires an image input so the patch grid is known; "
                       f"{idesc} holds pre-embedded tokens")
    tokens = _tokens(kind, data, weights, config)
    _, trace = model_forward(tokens, weights, config)
    layer = config.depth - 1 if args.layer is None else args.layer
    if not 0 <= layer < config.depth:
        raise CliError(f"--layer must be in [0, {config.depth - 1}]")
    assign = patch_assignment(trace.plans, config.n_tokens, upto=layer)
    title = f"fused patches after block {layer} (r={config.r_per_layer})"
    _emit(group_svg(assign, config.grid, title=title, image=data), settings["out"])
    return 0


def cmd_trace(args, settings):
    config = make_config(settings)
    weights, wdesc = load_weights(settings, config)
    kind, data, idesc = load_input(settings, config)
    logits, trace = model_forward(_tokens(kind, data, weights, config), weights, config)
    report = {
        "command": "trace",
        "config": config.to_dict(),
        "seed": settings["seed"],
        "weights": wdesc,
        "input": idesc,
        "logits": _floats(logits),
        **trace.to_dict(),
    }
    _emit(_dump(report), settings["out"])
    return 0


COMMANDS = {
    "forward": cmd_forward,
    "flops": cmd_flops,
    "oracle-check": cmd_oracle_check,
    "viz": cmd_viz,
    "trace": cmd_trace,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = resolve(args)
        return COMMANDS[args.command](args, settings)
    except CliError as exc:
        print(f"mctf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
