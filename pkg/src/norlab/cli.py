"""Command-line harness: ``norlab generate|train|eval|cdi|export-patterns|sweep``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical abort,
4 capacity error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import datagen, metrics
from .errors import CapacityError, ConfigError, ContractError, DomainError, NumericalAbort
from .inference import (EncoderParams, cdi_ub_sweeps, conjugate_posterior_batch,
                        exact_posterior_batch, lb_alternate_batch)
from .model import ModelParams

EXIT_CONFIG, EXIT_NUMERICAL, EXIT_CAPACITY = 2, 3, 4
DEFAULT_EVAL_SEED = 9001

PATTERN_KEYS = {"kind", "preset", "patterns", "leak", "w_on", "mu", "pattern_seed",
                "n_train", "n_val", "n_test", "seed"}
SPARSE_KEYS = {"kind", "preset", "D", "K", "alpha_theta", "beta_theta", "alpha_mu", "beta_mu",
               "s", "n_test", "n_val", "mask_leak", "n_train", "seed"}


def eval_seed() -> int:
    raw = os.environ.get("NORLAB_EVAL_SEED")
    if raw is None:
        return DEFAULT_EVAL_SEED
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"NORLAB_EVAL_SEED must be an integer, got {raw!r}", ["NORLAB_EVAL_SEED"])


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def load_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if v != v else repr(float(v))
    return str(v)


def csv_text(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(_fmt(r[h]) if isinstance(r, dict) else _fmt(r[i])
                       for i, h in enumerate(header)) for r in rows]
    return "\n".join(lines) + "\n"


# -- generate -----------------------------------------------------------------------

def _check_keys(cfg, allowed):
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}", unknown)


def build_generator(cfg: dict, seed=None):
    """Returns (ModelParams, sizes dict, sample seeds)."""
    if not isinstance(cfg, dict):
        raise ConfigError("generator config must be a JSON object")
    kind = cfg.get("kind")
    seed = int(cfg.get("seed", 0) if seed is None else seed)
    ss = np.random.SeedSequence(seed).generate_state(4)
    s_params, s_train, s_val, s_test = (int(v) for v in ss)
    if kind == "pattern":
        _check_keys(cfg, PATTERN_KEYS)
        extra = {k: cfg[k] for k in ("w_on", "mu") if k in cfg}
        preset = cfg.get("preset")
        if preset == "syn-pattern":
            spec = datagen.syn_pattern_spec(cfg.get("pattern_seed", seed))
            for k, v in extra.items():
                setattr(spec, k, v)
            spec.__post_init__()
        elif preset is None:
            if "patterns" not in cfg:
                raise ConfigError("pattern config needs a preset or a list of PGM patterns",
                                  ["patterns"])
            spec = datagen.load_pattern_spec(cfg["patterns"], cfg.get("leak"), **extra)
        else:
            raise ConfigError(f"unknown pattern preset {preset!r}", ["preset"])
        params = datagen.gen_patterned(spec)
        n_test = int(cfg.get("n_test", 1000))
    elif kind == "sparse":
        _check_keys(cfg, SPARSE_KEYS)
        fields = {k: cfg[k] for k in ("D", "K", "alpha_theta", "beta_theta", "alpha_mu",
                                      "beta_mu", "s", "n_test", "mask_leak") if k in cfg}
        try:
            if "preset" in cfg:
                if cfg["preset"] not in datagen.SPARSE_PRESETS:
                    raise ConfigError(f"unknown sparse preset {cfg['preset']!r}", ["preset"])
                spec = datagen.sparse_preset(cfg["preset"], seed=s_params, **fields)
            else:
                spec = datagen.SparseSpec(seed=s_params, **fields)
        except TypeError as exc:
            missing = [k for k in ("D", "K", "alpha_theta", "beta_theta", "alpha_mu", "beta_mu", "s")
                       if k not in fields]
            raise ConfigError(f"incomplete sparse config: {exc}", missing) from None
        params = datagen.gen_sparse(spec)
        n_test = spec.n_test
    else:
        raise ConfigError("config field 'kind' must be 'pattern' or 'sparse'", ["kind"])
    sizes = {"train": int(cfg.get("n_train", 1000)), "val": int(cfg.get("n_val", n_test)),
             "test": n_test}
    bad = [k for k, v in sizes.items() if v < 1]
    if bad:
        raise ConfigError("split sizes must be positive", [f"n_{k}" for k in bad])
    return params, sizes, {"train": s_train, "val": s_val, "test": s_test}


def cmd_generate(config, out, seed=None, n_train=None):
    cfg = load_json(config) if not isinstance(config, dict) else dict(config)
    if n_train is not None:
        cfg["n_train"] = n_train
    params, sizes, seeds = build_generator(cfg, seed)
    out = Path(out)
    datagen.write_params(out / "params.json", params)
    summary = {"D": params.D, "K": params.K, "expected_sparsity": datagen.expected_sparsity(params)}
    zeros = total = 0
    for split in ("train", "val", "test"):
        ds = datagen.sample_dataset(params, sizes[split], seeds[split], keep_latents=True)
        datagen.write_dataset(out / f"{split}.nords", ds)
        summary[f"n_{split}"] = sizes[split]
        summary[f"sparsity_{split}"] = datagen.sparsity(ds)
        zeros += int(np.count_nonzero(ds.x == 0))
        total += ds.x.size
    summary["sparsity"] = zeros / total
    datagen.atomic_write_text(out / "summary.json", dumps(summary))
    return summary


# -- train / eval -------------------------------------------------------------------------

def _load_split(data, split):
    path = Path(data) / f"{split}.nords"
    if not path.exists():
        raise FileNotFoundError(f"missing dataset file {path}")
    return datagen.read_dataset(path)


def cmd_train(method, data, config, out, seed=None, max_epochs=None, K=None):
    from .diffopt import TrainConfig, log_to_csv, train
    raw = {} if config is None else (load_json(config) if not isinstance(config, dict) else dict(config))
    if not isinstance(raw, dict):
        raise ConfigError("training config must be a JSON object")
    raw["method"] = method
    cfg = TrainConfig.from_dict(raw, seed=seed, max_epochs=max_epochs)
    tr, va = _load_split(data, "train"), _load_split(data, "val")
    truth_path = Path(data) / "params.json"
    truth = datagen.read_params(truth_path) if truth_path.exists() else None
    if not cfg.learn_generative and truth is None:
        raise ConfigError("learn_generative=false needs params.json in the data directory",
                          ["learn_generative"])
    if K is None:
        K = truth.K if truth is not None else None
    init = truth if not cfg.learn_generative else None
    res = train(method, tr, cfg, va, init_params=init, K=K, eval_seed=eval_seed())
    out = Path(out)
    datagen.write_params(out / "params.json", res.params)
    if res.encoder is not None:
        datagen.atomic_write_text(out / "encoder.json", res.encoder.to_json())
    meta = {"method": method, "seed": cfg.seed, "config": cfg.to_dict(), "D": tr.D,
            "K": res.params.K, "best_epoch": res.best_epoch, "val_nelbo": res.best_val,
            "stopped_early": res.stopped_early, "eval_seed": eval_seed()}
    datagen.atomic_write_text(out / "meta.json", dumps(meta))
    datagen.atomic_write_text(out / "train_log.csv", log_to_csv(res.log))
    return meta


def load_checkpoint(path):
    path = Path(path)
    meta = load_json(path / "meta.json")
    params = datagen.read_params(path / "params.json")
    enc = None
    if (path / "encoder.json").exists():
        enc = EncoderParams.from_json((path / "encoder.json").read_text(encoding="utf-8"))
    return meta, params, enc


def provider_for(method, params, enc, svi_outer=30):
    from .diffopt import posterior_provider
    if method == "exact":
        return lambda X: exact_posterior_batch(params, X)
    return posterior_provider(method, params, enc, svi_outer)


def evaluate(params, Q, ds, truth=None, sample_latents=False, seed=DEFAULT_EVAL_SEED):
    X = np.asarray(ds.x, dtype=float)
    res = {"nelbo": metrics.heldout_nelbo(params, lambda A: Q, X, 100, seed, batched=True)}
    if truth is not None:
        if ds.z_true is not None:
            z = metrics.infer_latents(Q, sample=sample_latents, rng=seed)
            res["f1"] = metrics.macro_f1(ds.z_true, z)
            res["em"] = metrics.exact_match(ds.z_true, z)
        if truth.theta.shape == params.theta.shape:
            res["pattern_score"] = metrics.match_patterns(params.theta, truth.theta).mean
    return res


def cmd_eval(checkpoint, data, true_params=None, sample_latents=False, debug_exact=False,
             out=None):
    meta, params, enc = load_checkpoint(checkpoint)
    te = _load_split(data, "test")
    if te.D != params.D:
        raise ContractError(f"checkpoint D={params.D} does not match data D={te.D}")
    truth = datagen.read_params(true_params) if true_params else None
    method = "exact" if debug_exact else meta["method"]
    svi_outer = meta.get("config", {}).get("svi_eval_outer", 30)
    Q = provider_for(method, params, enc, svi_outer)(np.asarray(te.x, dtype=float))
    res = {"method": method, **evaluate(params, Q, te, truth, sample_latents, eval_seed())}
    out = Path(out) if out else Path(checkpoint)
    datagen.atomic_write_text(out / "metrics.json", dumps(res))
    header = [k for k in ("method", "nelbo", "f1", "em", "pattern_score") if k in res]
    datagen.atomic_write_text(out / "metrics.csv", csv_text(header, [res]))
    return res


# -- cdi ---------------------------------------------------------------------------------------

def cmd_cdi(kind, params_path, data, out, sweeps=20, split="test"):
    params = datagen.read_params(params_path)
    ds = _load_split(data, split)
    if ds.D != params.D:
        raise ContractError(f"params D={params.D} does not match data D={ds.D}")
    X = np.asarray(ds.x, dtype=float)
    out = Path(out)
    if kind == "ub":
        tr = cdi_ub_sweeps(params, X, n_sweeps=sweeps)
        rows = [(t, tr.ll_ub[t], tr.elbo[t]) for t in range(len(tr.ll_ub))]
        trace = csv_text(["iteration", "mean_ll_ub", "mean_elbo"], rows)
        Q = tr.q
    elif kind == "lb":
        res = lb_alternate_batch(params, X, n_outer=sweeps)
        trace = csv_text(["iteration", "mean_lb_elbo"], list(enumerate(res.trace)))
        Q = res.q
    else:
        raise ConfigError(f"unknown bound kind {kind!r}", ["kind"])
    final = {"kind": kind, **evaluate(params, Q, ds, params, False, eval_seed())}
    final.pop("pattern_score", None)
    datagen.atomic_write_text(out / f"cdi_{kind}_trace.csv", trace)
    header = [k for k in ("kind", "nelbo", "f1", "em") if k in final]
    datagen.atomic_write_text(out / f"cdi_{kind}_final.csv", csv_text(header, [final]))
    return final


# -- pattern export -------------------------------------------------------------------------

def pgm_text(img: np.ndarray) -> str:
    H, W = img.shape
    rows = "\n".join(" ".join(str(int(v)) for v in row) for row in img)
    return f"P2\n{W} {H}\n255\n{rows}\n"


def column_image(col, H, W) -> np.ndarray:
    """Min maps to 255 (white), max to 0 (black); a constant column is all white."""
    col = np.asarray(col, dtype=float)
    lo, hi = col.min(), col.max()
    if hi <= lo:
        return np.full((H, W), 255, dtype=np.int64)
    return np.rint(255.0 * (hi - col) / (hi - lo)).astype(np.int64).reshape(H, W)


def cmd_export_patterns(checkpoint, H, W, out):
    path = Path(checkpoint)
    params = datagen.read_params(path / "params.json" if path.is_dir() else path)
    if H * W != params.D:
        raise ContractError(f"H*W = {H * W} does not match D = {params.D}")
    out = Path(out)
    names = []
    for k in range(params.K):
        name = f"theta_{k:03d}.pgm"
        datagen.atomic_write_text(out / name, pgm_text(column_image(params.theta[:, k], H, W)))
        names.append(name)
    datagen.atomic_write_text(out / "theta0.pgm", pgm_text(column_image(params.theta0, H, W)))
    return names + ["theta0.pgm"]


# -- sweep --------------------------------------------------------------------------------

CELL_KEYS = {"dataset", "method", "n_train", "seeds", "config", "name"}


def _run_cell(job):
    """One (cell, seed) run; returns test NELBO or an error string."""
    cell, seed, run_dir, base = job
    try:
        gen_cfg = load_json(Path(base) / cell["dataset"]) if isinstance(cell["dataset"], str) \
            else dict(cell["dataset"])
        data_dir = Path(run_dir) / "data"
        cmd_generate(gen_cfg, data_dir, n_train=int(cell["n_train"]))
        ck = Path(run_dir) / "model"
        cmd_train(cell["method"], data_dir, dict(cell.get("config", {})), ck, seed=seed)
        res = cmd_eval(ck, data_dir)
        return res["nelbo"], ""
    except Exception as exc:  # recorded per cell; the sweep continues
        return float("nan"), f"{type(exc).__name__}: {exc}"


def cmd_sweep(manifest, out, jobs=1):
    man = load_json(manifest)
    cells = man.get("cells") if isinstance(man, dict) else None
    if not isinstance(cells, list) or not cells:
        raise ConfigError("manifest needs a non-empty 'cells' list", ["cells"])
    for j, cell in enumerate(cells):
        unknown = sorted(set(cell) - CELL_KEYS)
        missing = sorted({"dataset", "method", "n_train", "seeds"} - set(cell))
        if unknown or missing:
            raise ConfigError(f"cell {j}: unknown {unknown} missing {missing}", unknown + missing)
    base = Path(manifest).resolve().parent
    out = Path(out)
    work = []
    for j, cell in enumerate(cells):
        for seed in cell["seeds"]:
            work.append((cell, int(seed), str(out / f"cell{j:03d}" / f"seed{int(seed)}"), str(base)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_cell, work))
    else:
        results = [_run_cell(w) for w in work]
    rows = []
    pos = 0
    for j, cell in enumerate(cells):
        vals = results[pos:pos + len(cell["seeds"])]
        pos += len(cell["seeds"])
        ok = np.array([v for v, err in vals if not err], dtype=float)
        errs = [err for _, err in vals if err]
        name = cell.get("name") or (cell["dataset"] if isinstance(cell["dataset"], str) else f"cell{j}")
        rows.append({"dataset": name, "n_train": int(cell["n_train"]), "method": cell["method"],
                     "n_runs": int(ok.size), "n_failed": len(errs),
                     "nelbo_mean": float(ok.mean()) if ok.size else float("nan"),
                     "nelbo_sd": float(ok.std(ddof=1)) if ok.size > 1 else float("nan"),
                     "errors": " | ".join(errs).replace(",", ";").replace("\n", " ")})
    header = ["dataset", "n_train", "method", "n_runs", "n_failed", "nelbo_mean", "nelbo_sd", "errors"]
    datagen.atomic_write_text(out / "sweep.csv", csv_text(header, rows))
    return rows


# -- entry point --------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="norlab", description="Noisy-OR inference experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--n-train", type=int)

    t = sub.add_parser("train", help="train ACP, AVI or SVI")
    t.add_argument("--method", required=True, choices=["acp", "avi", "svi"])
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--K", type=int)

    e = sub.add_parser("eval", help="test NELBO and recovery metrics of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--true-params")
    e.add_argument("--sample-latents", action="store_true")
    e.add_argument("--debug-exact", action="store_true",
                   help="use the exact posterior (enumeration) instead of the trained one")
    e.add_argument("--out")

    c = sub.add_parser("cdi", help="conjugate-dual inference diagnostics")
    c.add_argument("--kind", required=True, choices=["ub", "lb"])
    c.add_argument("--params", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--sweeps", type=int, default=20)
    c.add_argument("--split", default="test", choices=["train", "val", "test"])

    x = sub.add_parser("export-patterns", help="write weight columns as PGM images")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--H", type=int, required=True)
    x.add_argument("--W", type=int, required=True)
    x.add_argument("--out", required=True)

    s = sub.add_parser("sweep", help="run a grid of generate/train/eval cells")
    s.add_argument("--manifest", "--config", dest="manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    return ap


def run(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "generate":
        return cmd_generate(args.config, args.out, args.seed, args.n_train)
    if args.command == "train":
        return cmd_train(args.method, args.data, args.config, args.out, args.seed,
                         args.max_epochs, args.K)
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.data, args.true_params, args.sample_latents,
                        args.debug_exact, args.out)
    if args.command == "cdi":
        return cmd_cdi(args.kind, args.params, args.data, args.out, args.sweeps, args.split)
    if args.command == "export-patterns":
        return cmd_export_patterns(args.checkpoint, args.H, args.W, args.out)
    return cmd_sweep(args.manifest, args.out, args.jobs)


def main(argv=None) -> int:
    try:
        result = run(argv)
    except (ConfigError, ContractError, DomainError, FileNotFoundError) as exc:
        print(f"norlab: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"norlab: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CapacityError as exc:
        print(f"norlab: capacity: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    if result is not None:
        print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
