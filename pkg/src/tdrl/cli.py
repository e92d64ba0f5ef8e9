"""``tdrl gen|train|eval|check|report``.

Exit codes: 0 success, 2 configuration or validation error, 3 artifact IO
error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import io as tio
from .errors import ArtifactIOError, ConfigError, TDRLError

logger = logging.getLogger("tdrl")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if cfg is None:
        return {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a mapping at the top level")
    return cfg


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {}) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: must be a mapping")
    return dict(sec)


def _setup_numerics(deterministic: bool):
    import torch

    threads = os.environ.get("TDRL_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError as exc:
            raise ConfigError(f"TDRL_THREADS must be an integer, got {threads!r}") from exc
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# gen -----------------------------------------------------------------------

def cmd_gen(args) -> dict:
    from .data import make_dataset
    from .mixing import make_random_mixing
    from .sim import default_spec

    cfg = load_config(args.config)
    gen = _section(cfg, "generator")
    mix = _section(cfg, "mixing")
    if "family" not in gen:
        raise ConfigError("generator.family: required field is missing")
    if args.seed is not None:
        gen["seed"] = args.seed
    try:
        spec = default_spec(gen.pop("family"), **gen)
    except TypeError as exc:
        raise ConfigError(f"generator: {exc}") from exc
    unknown = set(mix) - {"depth", "seed", "slope"}
    if unknown:
        raise ConfigError(f"mixing: unknown fields {sorted(unknown)}")
    mixing = make_random_mixing(spec.n, int(mix.get("depth", 3)), int(mix.get("seed", spec.seed + 1)),
                                float(mix.get("slope", 0.2)))
    out = tio.ensure_dir(args.out)
    ds = make_dataset(spec, mixing=mixing)
    tio.save_dataset(out, ds)
    return {"config": {"generator": spec.to_dict(), "mixing": {"depth": mixing.depth, "seed": int(mix.get("seed", spec.seed + 1)),
                                                               "slope": mixing.slope}},
            "seeds": {"generator": spec.seed}, "inputs": [args.config] if args.config else []}


# train -----------------------------------------------------------------------

def _model_config(sec: dict, ds, seed):
    from .model import ModelConfig

    spec = ds.spec
    sec.setdefault("n", spec.n if spec is not None else ds.x.shape[-1])
    sec.setdefault("obs_dim", ds.x.shape[-1])
    if spec is not None:
        sec.setdefault("L", spec.L)
        sec.setdefault("partition", list(spec.partition))
    sec.setdefault("m", max(ds.m, 1))
    if seed is not None:
        sec["seed"] = seed
    try:
        return ModelConfig.from_dict(sec)
    except TypeError as exc:
        raise ConfigError(f"model: {exc}") from exc


def cmd_train(args) -> dict:
    from .plots import loss_curves
    from .trainer import TrainConfig, select_beta, train

    cfg = load_config(args.config)
    ds = tio.load_dataset(args.data)
    tsec = _section(cfg, "train")
    if args.seed is not None:
        tsec["seed"] = args.seed
    try:
        tc = TrainConfig.from_dict(tsec)
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from exc
    mc = _model_config(_section(cfg, "model"), ds, args.seed)
    out = tio.ensure_dir(args.out)

    def progress(line):
        print(line, flush=True)

    if len(tc.beta_grid) > 1:
        best, results = select_beta(ds, mc, tc, progress)
        lines = ["beta,best_val_total,best_epoch,error"]
        for r in results:
            if "error" in r:
                lines.append(f"{r['beta']:.17g},,,{r['error']}")
            else:
                lines.append(f"{r['beta']:.17g},{r['history'].best_val:.17g},{r['history'].best_epoch},")
        (out / "beta_selection.csv").write_text("\n".join(lines) + "\n")
        chosen = next(r for r in results if r["beta"] == best and "error" not in r)
        ckpt, hist = chosen["checkpoint"], chosen["history"]
    else:
        # a one-entry grid given explicitly overrides model.beta
        if "beta_grid" in tsec and tc.beta_grid:
            mc = type(mc).from_dict({**mc.to_dict(), "beta": tc.beta_grid[0]})
        ckpt, hist = train(ds, mc, tc, progress)
    tio.save_checkpoint(out / "checkpoint.pt", ckpt)
    tio.write_history_csv(out / "history.csv", hist)
    tio.write_kv(out / "train_summary.txt", {"best_epoch": hist.best_epoch, "best_val_total": hist.best_val,
                                              "beta": ckpt.model_config.beta, "stop_reason": hist.stop_reason,
                                              "epochs": len(hist.records)})
    loss_curves(hist.rows(), out / "loss.png")
    return {"config": {"model": ckpt.model_config.to_dict(), "train": tc.to_dict()},
            "seeds": {"model": ckpt.model_config.seed, "train": tc.seed},
            "inputs": [p for p in (args.data, args.config) if p]}


# eval ------------------------------------------------------------------------

def _resolve_checkpoint(path) -> Path:
    p = Path(path)
    return p / "checkpoint.pt" if p.is_dir() else p


def cmd_eval(args) -> dict:
    from .data import split_indices
    from .evaluation import compare_skeleton, mcc, recover_skeleton
    from .plots import correlation_heatmap, scatter_matched
    from .trainer import check_compatible, encode_means

    ds = tio.load_dataset(args.data)
    if ds.z is None:
        raise ConfigError("evaluation needs a dataset with ground-truth latents")
    val_fraction, seed = 0.1, 0
    if args.truth_as_estimates:
        idx = np.arange(ds.num_seqs)
        z_est = ds.z
        source = "ground truth"
    else:
        if args.checkpoint is None:
            raise ConfigError("--checkpoint is required unless --truth-as-estimates is given")
        ckpt = tio.load_checkpoint(_resolve_checkpoint(args.checkpoint))
        check_compatible(ds, ckpt.model_config)
        if ckpt.model_config.n != ds.z.shape[-1]:
            raise ConfigError(f"checkpoint has n={ckpt.model_config.n} latents, dataset has {ds.z.shape[-1]}")
        if ckpt.train_config is not None:
            val_fraction, seed = ckpt.train_config.val_fraction, ckpt.train_config.seed
        _, idx = split_indices(ds.num_seqs, val_fraction, seed)
        z_est = encode_means(ckpt.build(), ds.x[idx])
        source = str(args.checkpoint)
    z_true = ds.z[idx]
    report = mcc(z_true, z_est, args.mode)
    other = mcc(z_true, z_est, "pearson" if args.mode == "spearman" else "spearman")
    out = tio.ensure_dir(args.out)
    summary = {"mcc": report.mcc, "mode": report.mode, f"mcc_{other.mode}": other.mcc,
               "assignment": report.assignment.tolist(), "num_sequences": int(len(idx)), "source": source}
    tio.write_matrix_csv(out / "corr.csv", report.corr)
    if not args.no_skeleton and ds.adjacency is not None:
        L = ds.adjacency.shape[-1]
        sk = recover_skeleton(z_est, L)
        f1 = compare_skeleton(sk, ds.adjacency, report)
        summary["f1"] = f1
        tio.write_matrix_csv(out / "skeleton_scores.csv", sk.scores.transpose(0, 2, 1).reshape(sk.scores.shape[0], -1))
        tio.write_matrix_csv(out / "skeleton_threshold.csv", sk.threshold[None])
    else:
        summary["f1"] = "nan"
    tio.write_kv(out / "summary.txt", summary)
    scatter_matched(z_true, z_est, report, out / "scatter.png")
    correlation_heatmap(report.corr, out / "corr.png")
    print(f"mcc ({report.mode}): {report.mcc:.4f}  f1: {summary['f1']}")
    return {"config": {"mode": args.mode, "skeleton": not args.no_skeleton}, "seeds": {"split": seed},
            "inputs": [p for p in (args.data, args.checkpoint) if p]}


# check -----------------------------------------------------------------------

def _density_from_config(sec: dict):
    from . import conditions as C
    from .sim import _orthogonal

    kind = sec.get("kind")
    if kind is None:
        raise ConfigError("density.kind: required field is missing")
    n = int(sec.get("n", 3))
    L = int(sec.get("L", 1))
    rng = np.random.default_rng(int(sec.get("seed", 0)))
    d = n * L
    A = _orthogonal(rng, n, d) * 1.5
    q = lambda h: np.tanh(h @ A.T)  # noqa: E731
    if kind == "iid":
        dm = C.iid_normal_density(n)
    elif kind == "gaussian_additive":
        dm = C.gaussian_additive_density(q, float(sec.get("sigma", 0.5)), n)
    elif kind == "heteronoise":
        dm = C.heteronoise_density(q, C.tanh_precision(rng.standard_normal((n, d))), n)
    else:
        raise ConfigError(f"density.kind: unknown value {kind!r}; expected iid, gaussian_additive or heteronoise")
    probes = rng.standard_normal((int(sec.get("probes", 64)), d))
    z_t = rng.standard_normal((int(sec.get("z_probes", 8)), n))
    return dm, z_t, probes


def cmd_check(args) -> dict:
    from . import conditions as C
    from .sim import simulate

    cfg = load_config(args.config)
    threshold = float(cfg.get("threshold", C.DEFAULT_THRESHOLD))
    inputs = [p for p in (args.data, args.config) if p]
    if args.data:
        ds = tio.load_dataset(args.data)
        if ds.spec is None or ds.z is None:
            raise ConfigError("check needs a generated dataset with a generator spec and latents")
        # transition parameters do not depend on the number of sequences, so a short regeneration suffices
        small = type(ds.spec).from_dict({**ds.spec.to_dict(), "num_seqs": 2})
        dm = C.density_from_trajectories(simulate(small))
        z_t, probes = C.sample_probes(ds.z, ds.spec.L, seed=int(cfg.get("seed", 0)))
    elif "density" in cfg:
        dm, z_t, probes = _density_from_config(_section(cfg, "density"))
    else:
        raise ConfigError("check needs --data or a config with a density section")
    report = C.check_conditions(dm, z_t, probes, threshold)
    out = tio.ensure_dir(args.out)
    tio.write_kv(out / "condition_report.txt", report.summary())
    tio.write_matrix_csv(out / "singular_values.csv", report.singular_values[None])
    print(f"verdict: {report.verdict}  ratio: {report.ratio:.3g}")
    return {"config": {"threshold": threshold}, "seeds": {"probes": int(cfg.get("seed", 0))}, "inputs": inputs}


# report ----------------------------------------------------------------------

def cmd_report(args) -> dict:
    rows = []
    for run in args.runs:
        run = Path(run)
        entry = {"run": str(run)}
        for name in ("summary.txt", "train_summary.txt", "condition_report.txt"):
            if (run / name).exists():
                entry.update(tio.read_kv(run / name))
        if len(entry) == 1:
            raise ArtifactIOError(f"{run}: no summary files found")
        rows.append(entry)
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    lines = ["| " + " | ".join(keys) + " |", "|" + "---|" * len(keys)]
    for r in rows:
        lines.append("| " + " | ".join(str(r.get(k, "")) for k in keys) + " |")
    out = tio.ensure_dir(args.out)
    (out / "report.md").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return {"config": {}, "seeds": {}, "inputs": list(args.runs)}


# entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdrl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="YAML config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override every seed in the config")
        sp.add_argument("--deterministic", action="store_true",
                        help="single-threaded deterministic numerics; run manifest omits timestamps")

    sp = sub.add_parser("gen", help="generate a synthetic dataset")
    common(sp, config_required=True)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train a model on a dataset")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="MCC and skeleton recovery")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", help="checkpoint file or training output directory")
    sp.add_argument("--mode", choices=("spearman", "pearson"), default="spearman")
    sp.add_argument("--truth-as-estimates", action="store_true", help="score the ground-truth latents against themselves")
    sp.add_argument("--no-skeleton", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("check", help="identifiability condition check")
    common(sp)
    sp.add_argument("--data")
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("report", help="collect summaries from run directories")
    common(sp)
    sp.add_argument("runs", nargs="+")
    sp.set_defaults(func=cmd_report)
    return p


def _relative_out(argv):
    """The output directory is recorded as ``.`` so manifests do not depend on where a run was written."""
    out = list(argv)
    for i, a in enumerate(out):
        if a == "--out" and i + 1 < len(out):
            out[i + 1] = "."
        elif a.startswith("--out="):
            out[i] = "--out=."
    return out


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    started = _now()
    try:
        _setup_numerics(args.deterministic)
        ctx = args.func(args)
        tio.write_run_manifest(args.out, argv=["tdrl"] + _relative_out(argv), config=ctx["config"], seeds=ctx["seeds"],
                               inputs=ctx["inputs"], deterministic=args.deterministic,
                               started=started, finished=_now())
    except TDRLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
