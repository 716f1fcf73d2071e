"""Mini-batch Adam training loop with temperature annealing, validation-based
early stopping and best-checkpoint selection.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ..errors import ContractError, NumericalAbort
from ..inference import (EncoderParams, conjugate_posterior_batch, encode_acp, encode_avi,
                         lb_alternate_batch)
from ..model import BinaryDataset, ModelParams, elbo_mc_batch
from .config import TrainConfig
from .core import Adam, FlatParams, temperature_at
from .losses import (build_params, encoder_names, encoder_params, loss_acp, loss_avi, loss_svi,
                     model_params, sample_noise)

DEFAULT_EVAL_SEED = 9001
LOG_FIELDS = ("epoch", "step", "train_nelbo", "val_nelbo", "temperature", "wall_ms")


@dataclass
class TrainResult:
    flat: FlatParams
    log: List[dict]
    best_epoch: int
    best_val: float
    stopped_early: bool = False
    config: Optional[TrainConfig] = None

    @property
    def params(self) -> ModelParams:
        return model_params(self.flat)

    @property
    def encoder(self) -> Optional[EncoderParams]:
        return encoder_params(self.flat) if "enc_acts" in self.flat.meta else None


def posterior_provider(method, params: ModelParams, encoder: EncoderParams = None,
                       svi_outer=30):
    """Function X -> Q giving the method's posterior for new data."""
    if method == "acp":
        return lambda X: conjugate_posterior_batch(params, X, encode_acp(encoder, X))
    if method == "avi":
        return lambda X: encode_avi(encoder, X)
    if method == "svi":
        return lambda X: lb_alternate_batch(params, X, n_outer=svi_outer).q
    raise ContractError(f"unknown method {method!r}")


def flat_provider(p: FlatParams, cfg: TrainConfig):
    enc = encoder_params(p) if "enc_acts" in p.meta else None
    return posterior_provider(cfg.method, model_params(p), enc, cfg.svi_eval_outer)


def nelbo(params: ModelParams, X, Q, n_samples=100, seed=DEFAULT_EVAL_SEED) -> float:
    vals, _ = elbo_mc_batch(params, np.asarray(X, dtype=float), Q, n_samples, seed)
    return -float(np.mean(vals))


def _local_indices(p: FlatParams, rows):
    out = []
    for name in ("svi.logits", "svi.lam"):
        seg = p.layout[name]
        width = seg.size // seg.shape[0]
        out.append((seg.start + rows[:, None] * width + np.arange(width)[None, :]).ravel())
    return np.concatenate(out)


def train(method, dataset: BinaryDataset, cfg: TrainConfig, val: BinaryDataset = None,
          init_params: ModelParams = None, K=None, eval_seed=DEFAULT_EVAL_SEED) -> TrainResult:
    """Fit ``method`` on ``dataset``; validation NELBO drives early stopping.

    With ``cfg.learn_generative`` false, ``init_params`` is the fixed
    generative model and only the posterior side is trained.
    """
    if method != cfg.method:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "method": method})
    X = np.asarray(dataset.x, dtype=float)
    N, D = X.shape
    if init_params is not None and init_params.D != D:
        raise ContractError(f"dataset width {D} != model D {init_params.D}")
    if K is None:
        K = init_params.K if init_params is not None else _latent_width(dataset)
    Xval = np.asarray((val if val is not None else dataset).x, dtype=float)
    if Xval.shape[1] != D:
        raise ContractError("validation width differs from training width")

    rng = np.random.default_rng(cfg.seed)
    p = build_params(method, D, K, cfg, rng, init_params=init_params, n_data=N)
    names = []
    if cfg.learn_generative:
        names += ["theta_raw", "theta0_raw"] + (["mu_raw"] if cfg.learn_mu else [])
    names += encoder_names(p)
    global_idx = p.indices(names)
    opt = Adam(p.size, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    t_start = time.perf_counter()

    def wall():
        return int(round(1000 * (time.perf_counter() - t_start))) if cfg.record_wall_time else 0

    def validate(pp):
        Q = flat_provider(pp, cfg)(Xval)
        return nelbo(model_params(pp), Xval, Q, cfg.val_samples, eval_seed)

    best_val = validate(p)
    best = p.copy()
    best_epoch = 0
    log = [dict(epoch=0, step=0, train_nelbo=float("nan"), val_nelbo=best_val,
                temperature=temperature_at(0, cfg), wall_ms=wall())]
    step = 0
    bad = 0
    stopped = False
    B = min(cfg.batch_size, N)
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(N)
        losses = []
        for start in range(0, N, B):
            rows = np.sort(perm[start:start + B])
            tau = temperature_at(step, cfg)
            try:
                if method == "svi":
                    loss, grad = loss_svi(p, (rows, X[rows]), cfg, want_grad=True)
                    idx = np.concatenate([global_idx, _local_indices(p, rows)])
                else:
                    noise = sample_noise(rng, rows.size, cfg.mc_samples, K)
                    fn = loss_acp if method == "acp" else loss_avi
                    loss, grad = fn(p, X[rows], cfg, noise, tau=tau, want_grad=True)
                    idx = global_idx
                p = p.with_values(opt.step(p.values, grad, idx))
            except NumericalAbort as exc:
                err = NumericalAbort(f"training diverged at epoch {epoch}, step {step}: {exc}",
                                     exc.index)
                err.checkpoint = TrainResult(best, log, best_epoch, best_val, True, cfg)
                raise err from None
            losses.append(loss)
            step += 1
        val_nelbo = float("nan")
        if epoch % cfg.val_every == 0 or epoch == cfg.max_epochs:
            val_nelbo = validate(p)
            if val_nelbo < best_val:
                best_val, best, best_epoch, bad = val_nelbo, p.copy(), epoch, 0
            else:
                bad += 1
        log.append(dict(epoch=epoch, step=step, train_nelbo=float(np.mean(losses)),
                        val_nelbo=val_nelbo, temperature=temperature_at(step, cfg), wall_ms=wall()))
        if bad >= cfg.patience:
            stopped = True
            break
    return TrainResult(best, log, best_epoch, best_val, stopped, cfg)


def _latent_width(dataset):
    if dataset.z_true is not None:
        return dataset.z_true.shape[1]
    raise ContractError("K is unknown: pass K, init_params or a dataset with latents")


def log_to_csv(log) -> str:
    lines = [",".join(LOG_FIELDS)]
    for row in log:
        lines.append(",".join(_fmt(row[k]) for k in LOG_FIELDS))
    return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v != v:
        return ""
    return repr(float(v))
