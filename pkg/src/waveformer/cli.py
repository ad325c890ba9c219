"""Command-line entry point.

Exit codes: 0 success, 1 validation failure (bad config, missing or corrupt
files), 2 a ``--check`` assertion or shape contract failed.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import autograd as ad
from . import io
from . import metrics as M
from . import wavelet as W
from .attention import BlockParams, window_msa
from .model import (ModelConfig, Variant, count_params, count_params_by_module, expected_shapes, forward,
                    init_params, param_specs, predict)
from .tensor import Prng, seeded_randn
from .train import gen_synthetic, train_toy

log = logging.getLogger("waveformer")

# published reference totals, used by `params --check` at base width 48
REFERENCE_PARAMS = {
    Variant.SIMPLE_UP: 19.3e6,
    Variant.RESIDUAL_UP: 16.97e6,
    Variant.HF_REF: 17.06e6,
    Variant.RESIDUAL_UP_MLA: 16.97e6,
}
PARAM_TOLERANCE = 0.15


class CheckFailed(Exception):
    pass


def _config(args) -> io.RunConfig:
    cfg = io.load_run_config(args.config) if getattr(args, "config", None) else io.RunConfig()
    if getattr(args, "variant", None):
        cfg.model.variant = Variant(args.variant)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "iterations", None) is not None:
        cfg.iterations = args.iterations
    return cfg.validate()


def _report(ok: bool, what: str, failures: list):
    print(f"  [{'PASS' if ok else 'FAIL'}] {what}")
    if not ok:
        failures.append(what)


def _finish(failures: list) -> int:
    if failures:
        print(f"{len(failures)} check(s) failed", file=sys.stderr)
        raise CheckFailed("; ".join(failures))
    return 0


def _shape(s) -> str:
    return "x".join(str(v) for v in s)


# -- shapes ------------------------------------------------------------------


def cmd_shapes(args) -> int:
    cfg = _config(args).model
    C, H = cfg.base_channels, cfg.input_extent
    print(f"config: P={cfg.in_channels} classes={cfg.num_classes} C={C} input={H}^3 "
          f"variant={cfg.variant.value} window={cfg.attn_window}")
    print(f"{'stage':>5} {'channels':>8} {'grid':>6} {'m':>2}  {'DWT level grids':<22} "
          f"{'attn grid':>9} {'attn tokens':>11} {'windows':>7}")
    attn_tokens = []
    for s in range(4):
        g, m = cfg.grids[s], cfg.stage_dwt_levels[s]
        levels = [g // 2 ** j for j in range(1, m + 1)]
        coarse = g // 2 ** m
        tokens = coarse ** 3
        attn_tokens.append(tokens)
        windows = (coarse // cfg.attn_window) ** 3
        lv = ", ".join(f"{v}^3" for v in levels) or "-"
        print(f"{s + 1:>5} {cfg.dims[s]:>8} {g:>4}^3 {m:>2}  {lv:<22} {coarse:>7}^3 {tokens:>11} {windows:>7}")
        if cfg.variant is Variant.RESIDUAL_UP_MLA and m > 0:
            per_level = ", ".join(f"{(v // cfg.attn_window) ** 3}" for v in levels)
            print(f"{'':>5} multi-level windows per level: {per_level}")

    trace: list = []
    t0 = time.perf_counter()
    params = init_params(cfg, 0)
    with ad.no_grad():
        forward(params, np.zeros((cfg.in_channels,) + (H,) * 3, np.float32), cfg, trace)
    print(f"forward pass: {time.perf_counter() - t0:.1f}s")
    failures: list = []
    got = dict(trace)
    for label, want in expected_shapes(cfg):
        have = got.get(label)
        ok = have == want
        print(f"  {label:<28} {_shape(have) if have else 'missing':<18} expected {_shape(want):<18} "
              f"{'ok' if ok else 'MISMATCH'}")
        if not ok:
            failures.append(label)
    if args.check:
        uniform = (H // 16) ** 3
        _report(all(t == uniform for t in attn_tokens),
                f"attention tokens {uniform} at every stage", failures)
    return _finish(failures)


# -- params ------------------------------------------------------------------


def cmd_params(args) -> int:
    run = _config(args)
    cfg = run.model
    groups = count_params_by_module(cfg)
    total = count_params(cfg)
    print(f"variant {cfg.variant.value}: C={cfg.base_channels} P={cfg.in_channels} classes={cfg.num_classes}")
    for name, n in groups.items():
        print(f"  {name:<12} {n:>12,}")
    print(f"  {'total':<12} {total:>12,}  ({total / 1e6:.2f}M)")
    if not args.check:
        return 0
    totals = {}
    for v in Variant:
        alt = ModelConfig(**{**cfg.to_dict(), "variant": v.value})
        totals[v] = count_params(alt)
    print("all variants:")
    for v, n in totals.items():
        print(f"  {v.value:<16} {n:>12,}  ref {REFERENCE_PARAMS[v] / 1e6:.2f}M  "
              f"rel {n / REFERENCE_PARAMS[v] - 1:+.1%}")
    failures: list = []
    _report(totals[Variant.RESIDUAL_UP] == totals[Variant.RESIDUAL_UP_MLA],
            "residual-up == residual-up-mla (shared multi-level weights)", failures)
    _report(totals[Variant.SIMPLE_UP] > totals[Variant.HF_REF] > totals[Variant.RESIDUAL_UP],
            "simple-up > hf-ref > residual-up", failures)
    if cfg.base_channels == 48:
        for v, n in totals.items():
            _report(abs(n / REFERENCE_PARAMS[v] - 1) <= PARAM_TOLERANCE,
                    f"{v.value} within {PARAM_TOLERANCE:.0%} of {REFERENCE_PARAMS[v] / 1e6:.2f}M", failures)
    return _finish(failures)


# -- roundtrip ---------------------------------------------------------------


def roundtrip_report(vol: np.ndarray, levels: int, wavelet: str):
    dec = W.dwt3d_multi(vol, levels, wavelet)
    rec = W.idwt3d_multi(dec, wavelet)
    err = float(np.max(np.abs(rec.astype(np.float64) - vol.astype(np.float64))))
    lf, det = W.level_energies(dec)
    total = lf + sum(det)
    if total == 0:
        fractions = [1.0] + [0.0] * len(det)
    else:
        fractions = [lf / total] + [d / total for d in det]
    return err, fractions, W.lf_upsample(dec.lf, levels, wavelet).astype(np.float32)


def cmd_roundtrip(args) -> int:
    src = Path(args.inp)
    if not src.is_file():
        raise FileNotFoundError(f"input volume {src} does not exist")
    vol = io.read_volume(src)
    W.check_divisible(vol.shape[1:], args.levels)
    err, fractions, lf_only = roundtrip_report(vol, args.levels, args.wavelet)
    print(f"volume {src} shape {_shape(vol.shape)}, {args.levels} level(s), wavelet {args.wavelet}")
    print(f"max abs roundtrip error: {err:.3e}")
    print(f"  energy LF (level {args.levels}): {fractions[0]:.6%}")
    for j, f in enumerate(fractions[1:], start=1):
        print(f"  energy HF level {j}: {f:.6%}")
    print(f"  sum of fractions: {sum(fractions):.9f}")
    if args.out:
        io.write_volume(args.out, lf_only)
        print(f"wrote LF-only reconstruction to {args.out}")
    if not args.check:
        return 0
    failures: list = []
    _report(err <= 1e-5, "roundtrip error <= 1e-5", failures)
    _report(abs(sum(fractions) - 1) <= 1e-6, "energy fractions sum to 1 within 1e-6", failures)
    return _finish(failures)


# -- bench-attn --------------------------------------------------------------


def _time_attention(dim: int, heads: int, grid: int, window: int, repeats: int, seed: int) -> float:
    from .attention import AttentionConfig

    prng = Prng(seed)
    params = BlockParams.init(prng, dim)
    params["proj_w"] = seeded_randn(prng, (dim, dim), np.float32) * 0.02
    tokens = seeded_randn(prng, (dim, grid, grid, grid), np.float32)
    acfg = AttentionConfig(heads, dim, window)
    best = float("inf")
    with ad.no_grad():
        # warm-up, and batch tiny calls so each sample spans >= 20 ms
        t0 = time.perf_counter()
        window_msa(tokens, params, acfg)
        inner = max(1, math.ceil(0.02 / max(time.perf_counter() - t0, 1e-9)))
        for _ in range(repeats):
            t0 = time.perf_counter()
            for _ in range(inner):
                window_msa(tokens, params, acfg)
            best = min(best, (time.perf_counter() - t0) / inner)
    return best


def bench_rows(cfg: ModelConfig, repeats: int = 3, timing: bool = True) -> list:
    rows = []
    for s in range(4):
        g, m, dim = cfg.grids[s], cfg.stage_dwt_levels[s], cfg.dims[s]
        coarse = g // 2 ** m
        row = {
            "stage": s + 1, "m": m, "grid": g, "lf_grid": coarse,
            "tokens_full": g ** 3, "tokens_lf": coarse ** 3,
            "token_reduction": g ** 3 // coarse ** 3,
            "score_reduction": (g ** 3 // coarse ** 3) ** 2,
        }
        if timing:
            heads = cfg.stage_heads[s]
            row["time_lf"] = _time_attention(dim, heads, coarse, cfg.attn_window, repeats, 11 + s)
            row["time_full"] = (_time_attention(dim, heads, g, cfg.attn_window, repeats, 11 + s)
                                if m else row["time_lf"])
        rows.append(row)
    return rows


def cmd_bench_attn(args) -> int:
    cfg = _config(args).model
    rows = bench_rows(cfg, args.repeats)
    print(f"input {cfg.input_extent}^3, C={cfg.base_channels}, window {cfg.attn_window}")
    print("full-resolution timing uses window attention with the same window; "
          "global attention at that size is reported by its score-matrix ratio only")
    print(f"{'stage':>5} {'m':>2} {'tokens w/o DWT':>14} {'tokens w/ DWT':>13} {'token x':>8} "
          f"{'score-matrix x':>15} {'t full (s)':>11} {'t LF (s)':>10}")
    for r in rows:
        print(f"{r['stage']:>5} {r['m']:>2} {r['tokens_full']:>14} {r['tokens_lf']:>13} {r['token_reduction']:>8} "
              f"{r['score_reduction']:>15,} {r['time_full']:>11.4f} {r['time_lf']:>10.4f}")
    if not args.check:
        return 0
    failures: list = []
    uniform = cfg.grids[0] // 2 ** cfg.stage_dwt_levels[0]
    _report(all(r["tokens_lf"] == uniform ** 3 for r in rows),
            f"{uniform ** 3} attention tokens at every stage", failures)
    r1 = rows[0]
    _report(r1["token_reduction"] == 8 ** r1["m"], f"stage-1 token reduction {8 ** r1['m']}", failures)
    for r in rows:
        if r["m"]:
            _report(r["time_lf"] < r["time_full"], f"stage {r['stage']} LF attention faster than full", failures)
    return _finish(failures)


# -- data / train / predict / eval ------------------------------------------


def _case_name(split_dir: Path, i: int, kind: str) -> Path:
    return split_dir / f"case_{i:04d}_{kind}.wvf"


def cmd_gen_data(args) -> int:
    run = _config(args)
    out = Path(args.out or run.data_dir or "")
    if not str(out):
        raise ValueError("gen-data needs --out or data_dir in the config")
    cfg = run.model
    splits = {"train": (run.seed, run.n_train), "val": (run.seed + 1_000_003, run.n_val)}
    for split, (seed, n) in splits.items():
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        samples = gen_synthetic(seed, n, cfg.input_extent, cfg.in_channels, cfg.num_classes, run.noise)
        for i, s in enumerate(samples):
            io.write_volume(_case_name(d, i, "image"), s.volume)
            io.write_volume(_case_name(d, i, "label"), s.labels[None].astype(np.float32))
    manifest = {"seed": run.seed, "extent": cfg.input_extent, "in_channels": cfg.in_channels,
                "num_classes": cfg.num_classes, "n_train": run.n_train, "n_val": run.n_val, "noise": run.noise}
    (out / "dataset.yaml").write_text(yaml.safe_dump(manifest, sort_keys=True))
    print(f"wrote {run.n_train} train / {run.n_val} val cases to {out}")
    return 0


def _load_split(root: Path, split: str | None):
    d = root / split if split and (root / split).is_dir() else root
    images = sorted(d.glob("case_*_image.wvf"))
    if not images:
        raise FileNotFoundError(f"no case_*_image.wvf files under {d}")
    from .train import SynthSample

    out = []
    for img in images:
        lab = img.with_name(img.name.replace("_image", "_label"))
        labels = io.read_labels(lab) if lab.is_file() else None
        out.append((img.name.replace("_image.wvf", ""), SynthSample(io.read_volume(img), labels)))
    return out


def _check_store(store, cfg: ModelConfig):
    specs = param_specs(cfg)
    if set(store.names()) != set(specs):
        missing = sorted(set(specs) - set(store.names()))[:3]
        extra = sorted(set(store.names()) - set(specs))[:3]
        raise ValueError(f"checkpoint does not match config (missing {missing}, unexpected {extra})")
    for name, spec in specs.items():
        if store[name].shape != spec.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {store[name].shape}, config expects {spec.shape}")


def cmd_train(args) -> int:
    run = _config(args)
    data_dir = Path(args.data or run.data_dir or "")
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory {data_dir} does not exist")
    ckpt = Path(args.out or run.checkpoint or "model.wfck")
    trace_path = Path(args.trace or run.loss_trace or ckpt.with_suffix(".loss.csv"))
    for p in (ckpt, trace_path):
        p.parent.mkdir(parents=True, exist_ok=True)
    cases = _load_split(data_dir, "train")
    samples = [s for _, s in cases]
    if any(s.labels is None for s in samples):
        raise FileNotFoundError("every training image needs a matching _label.wvf")

    def progress(it, loss, dice, ce):
        if it == 1 or it % 50 == 0 or it == run.iterations:
            print(f"iter {it:>5} loss {loss:.4f} dice {dice:.4f} ce {ce:.4f}", flush=True)

    t0 = time.perf_counter()
    res = train_toy(run.model, samples, run.iterations, run.seed, lr=run.lr,
                    weight_decay=run.weight_decay, batch_size=run.batch_size, callback=progress)
    io.save_checkpoint(ckpt, res.params)
    with trace_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "dice", "ce"])
        for it, loss, dice, ce in res.trace:
            w.writerow([it, repr(loss), repr(dice), repr(ce)])
    print(f"trained {run.iterations} iterations in {time.perf_counter() - t0:.0f}s; "
          f"checkpoint {ckpt}, loss trace {trace_path}")
    return 0


def _predictions(run: io.RunConfig, checkpoint: Path, cases):
    store = io.load_checkpoint(checkpoint)
    _check_store(store, run.model)
    for name, s in cases:
        yield name, predict(store, s.volume, run.model)


def cmd_predict(args) -> int:
    run = _config(args)
    ckpt = Path(args.checkpoint or run.checkpoint or "")
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint {ckpt} does not exist")
    src = Path(args.inp or run.data_dir or "")
    if not src.is_dir():
        raise FileNotFoundError(f"input directory {src} does not exist")
    out = Path(args.out or run.out_dir or "predictions")
    cases = _load_split(src, "val")
    out.mkdir(parents=True, exist_ok=True)
    for name, labels in _predictions(run, ckpt, cases):
        io.write_volume(out / f"{name}_label.wvf", labels[None].astype(np.float32))
    print(f"wrote {len(cases)} prediction(s) to {out}")
    return 0


def evaluate(pairs, num_classes: int, spacing, bins=None, metric_names=("dice", "hd95")) -> dict:
    """Per-case and aggregate metrics for ``(name, pred, gt)`` triples."""
    rows, preds, gts = [], [], []
    for name, pred, gt in pairs:
        preds.append(pred)
        gts.append(gt)
        for k in range(1, num_classes):
            row = {"case": name, "class": k}
            if "dice" in metric_names:
                row["dice"] = M.dice_eval(pred, gt, k)
            if "hd95" in metric_names:
                try:
                    row["hd95"] = M.hd95(pred, gt, k, spacing)
                except M.EmptyMaskError:
                    row["hd95"] = None
            rows.append(row)
    summary = {}
    for k in range(1, num_classes):
        cls_rows = [r for r in rows if r["class"] == k]
        entry = {}
        if "dice" in metric_names:
            entry["dice"] = float(np.mean([r["dice"] for r in cls_rows]))
        if "hd95" in metric_names:
            vals = [r["hd95"] for r in cls_rows if r["hd95"] is not None]
            entry["hd95"] = float(np.mean(vals)) if vals else None
            entry["hd95_undefined"] = len(cls_rows) - len(vals)
        if bins:
            entry["binned_dice"] = M.dice_by_size_bin(preds, gts, k, bins, spacing)
        summary[k] = entry
    mean_dice = float(np.mean([r["dice"] for r in rows])) if rows and "dice" in metric_names else None
    return {"cases": rows, "per_class": summary, "mean_foreground_dice": mean_dice}


def cmd_eval(args) -> int:
    run = _config(args)
    K = run.model.num_classes
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        if not ckpt.is_file():
            raise FileNotFoundError(f"checkpoint {ckpt} does not exist")
        data = Path(args.data or run.data_dir or "")
        if not data.is_dir():
            raise FileNotFoundError(f"data directory {data} does not exist")
        cases = _load_split(data, "val")
        if any(s.labels is None for _, s in cases):
            raise FileNotFoundError("evaluation cases need _label.wvf files")
        truth = {name: s.labels for name, s in cases}
        pairs = [(name, pred, truth[name]) for name, pred in _predictions(run, ckpt, cases)]
    else:
        if not (args.pred and args.gt):
            raise ValueError("eval needs --pred and --gt directories, or --checkpoint with --data")
        pdir, gdir = Path(args.pred), Path(args.gt)
        for d in (pdir, gdir):
            if not d.is_dir():
                raise FileNotFoundError(f"directory {d} does not exist")
        gt_files = sorted(gdir.glob("*_label.wvf"))
        if not gt_files:
            raise FileNotFoundError(f"no *_label.wvf files in {gdir}")
        pairs = []
        for g in gt_files:
            p = pdir / g.name
            if not p.is_file():
                raise FileNotFoundError(f"prediction {p} missing for ground truth {g.name}")
            pairs.append((g.name.replace("_label.wvf", ""), io.read_labels(p), io.read_labels(g)))
    bins = list(args.bins) if args.bins else (list(run.bins) if run.bins else None)
    res = evaluate(pairs, K, run.spacing, bins, run.metrics)

    print(f"{'case':<12} {'class':>5} {'dice':>8} {'hd95':>8}")
    for r in res["cases"]:
        hd = r.get("hd95")
        print(f"{r['case']:<12} {r['class']:>5} {r.get('dice', float('nan')):>8.4f} "
              f"{'undef' if hd is None else f'{hd:.3f}':>8}")
    print("aggregate:")
    for k, e in res["per_class"].items():
        line = f"  class {k}: dice {e.get('dice', float('nan')):.4f}"
        if "hd95" in e:
            line += f", hd95 {'undef' if e['hd95'] is None else format(e['hd95'], '.3f')}"
            if e["hd95_undefined"]:
                line += f" ({e['hd95_undefined']} undefined)"
        if "binned_dice" in e:
            line += ", binned " + ", ".join(f"{M.bin_label(i, len(bins))}={v:.4f}"
                                             for i, v in e["binned_dice"].items())
        print(line)
    print(f"  mean foreground dice: {res['mean_foreground_dice']:.4f}")

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "metrics_cases.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case", "class", "dice", "hd95"])
            for r in res["cases"]:
                w.writerow([r["case"], r["class"], repr(r.get("dice")), "" if r.get("hd95") is None
                            else repr(r["hd95"])])
        with (out / "metrics_summary.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "metric", "value"])
            for k, e in res["per_class"].items():
                for key in ("dice", "hd95"):
                    if key in e:
                        w.writerow([k, key, "" if e[key] is None else repr(e[key])])
                for i, v in e.get("binned_dice", {}).items():
                    w.writerow([k, f"dice_{M.bin_label(i, len(bins))}", repr(v)])
            w.writerow(["all", "mean_foreground_dice", repr(res["mean_foreground_dice"])])
    if args.min_dice is not None:
        failures: list = []
        _report(res["mean_foreground_dice"] >= args.min_dice,
                f"mean foreground dice >= {args.min_dice}", failures)
        return _finish(failures)
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="waveformer", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    variants = [v.value for v in Variant]

    def common(p, check=True):
        p.add_argument("--config", help="flat YAML run config")
        p.add_argument("--variant", choices=variants)
        p.add_argument("--seed", type=int)
        if check:
            p.add_argument("--check", action="store_true", help="assert the reported claims")
        return p

    common(sub.add_parser("shapes", help="stage / decoder shape chain")).set_defaults(fn=cmd_shapes)
    common(sub.add_parser("params", help="parameter counts")).set_defaults(fn=cmd_params)

    p = sub.add_parser("roundtrip", help="wavelet decomposition and reconstruction of a WVF1 volume")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--levels", type=int, default=1)
    p.add_argument("--wavelet", default="haar", choices=sorted(W.FILTERS))
    p.add_argument("--out")
    p.add_argument("--check", action="store_true")
    p.set_defaults(fn=cmd_roundtrip)

    p = common(sub.add_parser("bench-attn", help="attention token counts and timing with / without DWT"))
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(fn=cmd_bench_attn)

    p = common(sub.add_parser("gen-data", help="write a seeded synthetic dataset"), check=False)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_gen_data)

    p = common(sub.add_parser("train", help="train on a generated dataset"), check=False)
    p.add_argument("--data")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--trace", help="loss trace CSV path")
    p.add_argument("--iterations", type=int)
    p.set_defaults(fn=cmd_train)

    p = common(sub.add_parser("predict", help="write argmax label volumes"), check=False)
    p.add_argument("--checkpoint")
    p.add_argument("--in", dest="inp")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_predict)

    p = common(sub.add_parser("eval", help="Dice / HD95 / binned Dice"), check=False)
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--out", help="directory for metrics CSVs")
    p.add_argument("--bins", type=float, nargs="+", help="volume thresholds in cm^3")
    p.add_argument("--min-dice", type=float)
    p.set_defaults(fn=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except CheckFailed:
        return 2
    except (ValueError, FileNotFoundError, OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
