"""Joint training of per-instrument VAEs with a latent mixed-effects model.

Training alternates between (a) Adam updates of all encoder/decoder
parameters against a combined loss with the mixed model frozen, and (b) a
refit of the mixed model on freshly drawn latent trajectories.

The combined loss is

    norm1 * (gamma * sum_{i,t} ||zhat_{i,t} - z_{i,t}||^2  -  eta * L_ML)
  + norm2 * sum_{i,l,t} (-recon + beta * KL)

where z_{i,t} averages the per-instrument latent draws available at a visit
and zhat is the mixed-model prediction (BLUE/BLUP of the current draws with
frozen variance parameters). Decoders reconstruct from zhat, not from z.
Gradients flow through the averaging and through BLUE/BLUP as fixed linear
maps; the frozen variance parameters receive none.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import expit

from . import mlmm, nn, vae
from .dataio import Dataset
from .errors import ConditioningError, ShapeError, ValidationError
from .mlmm import LOG_2PI, DesignPair, MixedModelData, MixedModelParams, ModelSpec


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the joint fit.

    Defaults follow the reference setup: latent dimension 3, KL weight 0.5,
    alignment weights 5, 20 epochs of 100 full-batch Adam updates each, one
    Monte Carlo sample per observation, hidden layers (250, 100).
    """

    d: int = 3
    beta: float = 0.5
    gamma: float = 5.0
    eta: float = 5.0
    epochs: int = 20
    vae_updates_per_epoch: int = 100
    mc_samples: int = 1
    hidden: tuple[int, ...] = (250, 100)
    lr: float = 1e-3
    normalizer: str = "literal"      # "literal" keeps the 1/|I| factor; "per-visit" drops it
    criterion: str = "ML"            # refit criterion for the mixed model
    lbfgs_initial_step: float = 0.15
    # refit variances are clamped into [refit_var_min, refit_var_max]: the epoch-level
    # alternation otherwise admits a degenerate spiral (each refit tightens the variances
    # around a still-concentrated latent cloud, the alignment terms then reward further
    # concentration without bound). The band is wide enough to stay inactive once the
    # latents spread toward the unit-scale prior.
    refit_var_min: float = 0.1
    refit_var_max: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.d < 1 or self.epochs < 1 or self.vae_updates_per_epoch < 0:
            raise ValidationError("invalid training configuration")
        if min(self.beta, self.gamma, self.eta) < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.normalizer not in ("literal", "per-visit"):
            raise ValidationError(f"unknown normalizer {self.normalizer!r}")


class PreparedData:
    """Dataset compiled to flat arrays for batched training."""

    def __init__(self, dataset: Dataset, spec: ModelSpec, stats,
                 w_fixed=None, w_random=None):
        self.spec = spec
        self.stats = stats
        self.schemas = dataset.schemas
        self.instruments = dataset.instrument_names
        patients = sorted(dataset.patients, key=lambda p: p.pid)
        self.pids = [p.pid for p in patients]
        self.patients = patients
        designs = []
        for pat in patients:
            dp = mlmm.build_design(pat, spec, stats)
            if w_fixed is not None:
                dp = mlmm.augment_fixed(dp, w_fixed[pat.pid])
            if w_random is not None:
                dp = mlmm.augment_random(dp, w_random[pat.pid])
            designs.append(dp)
        self.designs = designs
        self.fixed_labels = spec.fixed_labels()
        if w_fixed is not None:
            k = next(iter(w_fixed.values())).shape[1]
            self.fixed_labels = self.fixed_labels + tuple(f"knockoff:{j}" for j in range(k))
        self.random_labels = spec.random_labels()
        if w_random is not None:
            k = next(iter(w_random.values())).shape[1]
            self.random_labels = self.random_labels + tuple(f"knockoff:re{j}" for j in range(k))

        self.m = [p.n_visits for p in patients]
        self.offsets = np.concatenate([[0], np.cumsum(self.m)]).astype(int)
        self.n_visits_total = int(self.offsets[-1])
        self.n_patients = len(patients)

        counts = np.zeros(self.n_visits_total, dtype=int)
        per_inst: dict[str, dict[str, list]] = {
            name: {"bits": [], "levels": [], "missing": [], "cannot": [], "fv": []}
            for name in self.instruments}
        for pi, pat in enumerate(patients):
            for vi in range(pat.n_visits):
                here = [n for (v, n) in pat.observations if v == vi]
                if not here:
                    raise ValidationError(f"patient {pat.pid}: visit {vi} has no instrument")
                counts[self.offsets[pi] + vi] = len(here)
            for (vi, name), obs in pat.observations.items():
                acc = per_inst[name]
                acc["levels"].append(obs.levels)
                acc["missing"].append(obs.missing)
                acc["cannot"].append(obs.cannot)
                acc["fv"].append(self.offsets[pi] + vi)
        self.inst_rows: dict[str, dict] = {}
        self.n_obs_total = 0
        for name in self.instruments:
            acc = per_inst[name]
            if not acc["fv"]:
                self.inst_rows[name] = None
                continue
            levels = np.asarray(acc["levels"], dtype=int)
            missing = np.asarray(acc["missing"], dtype=bool)
            cannot = np.asarray(acc["cannot"], dtype=bool)
            bits = vae.encode_inputs(self.schemas[name], levels, missing, cannot)
            fv = np.asarray(acc["fv"], dtype=int)
            self.inst_rows[name] = {"bits": bits, "levels": levels, "missing": missing,
                                    "cannot": cannot, "fv": fv}
            self.n_obs_total += fv.size
        self.counts = counts


class MixedMaps:
    """Per-patient linear-algebra work for frozen variance parameters."""

    def __init__(self, prep: PreparedData, d: int, log_phi: np.ndarray, log_sigma: np.ndarray):
        phi = np.exp(log_phi)
        sigma = np.exp(log_sigma)
        self.d = d
        self.phi = phi
        self.sigma = sigma
        eye = np.eye(d)
        self.Xk, self.Tk, self.V, self.K, self.S, self.logdet_v = [], [], [], [], [], []
        p = prep.designs[0].X.shape[1]
        self.pd = p * d
        M = np.zeros((self.pd, self.pd))
        for dp, m in zip(prep.designs, prep.m):
            Xk = np.kron(eye, dp.X)
            Tk = np.kron(eye, dp.T)
            V, logdet_v = mlmm._patient_cov_chol(Tk, phi, sigma, m)
            K = Xk.T @ V
            S = (Tk * phi) @ (Tk.T @ V)
            M += K @ Xk
            self.Xk.append(Xk)
            self.Tk.append(Tk)
            self.V.append(V)
            self.K.append(K)
            self.S.append(S)
            self.logdet_v.append(logdet_v)
        self.LM = mlmm._chol(M, "fixed-effect normal equations") if self.pd else np.zeros((0, 0))

    def solve_m(self, v: np.ndarray) -> np.ndarray:
        if self.pd == 0:
            return np.zeros(0)
        return cho_solve((self.LM, True), v)


def average_latents(draws: dict[str, np.ndarray], availability: dict[str, np.ndarray],
                    n_visits: int) -> np.ndarray:
    """Average per-instrument latent draws over the instruments present at each visit.

    ``draws[name]`` holds one row per observation of that instrument and
    ``availability[name]`` the corresponding visit indices.
    """
    first = next(iter(draws.values()))
    z = np.zeros((n_visits, first.shape[1]))
    counts = np.zeros(n_visits)
    for name, rows in draws.items():
        idx = np.asarray(availability[name], dtype=int)
        if rows.shape[0] != idx.shape[0]:
            raise ShapeError(f"{name}: draw rows and availability disagree")
        np.add.at(z, idx, rows)
        np.add.at(counts, idx, 1.0)
    if (counts == 0).any():
        raise ValidationError("a visit has no instrument draw; it should have been excluded at ingestion")
    return z / counts[:, None]


@dataclass
class TrainedModel:
    """Final state of a joint fit plus everything needed to use it."""

    config: TrainConfig
    spec: ModelSpec
    stats: dict
    schemas: dict
    vae: dict[str, vae.VaeParams]
    mm: MixedModelParams
    blups: dict[str, np.ndarray]
    pids: list[str]
    designs: list[DesignPair]
    fixed_labels: tuple[str, ...]
    random_labels: tuple[str, ...]
    final_latents: dict[str, np.ndarray]
    loss_trace: list[dict]
    diagnostics: dict = field(default_factory=dict)

    def mixed_data(self) -> MixedModelData:
        return MixedModelData(self.designs, [self.final_latents[p] for p in self.pids], list(self.pids))


class JointTrainer:
    """Owns the training state; see :func:`fit_joint` for the one-call API."""

    def __init__(self, dataset: Dataset, spec: ModelSpec, config: TrainConfig,
                 rng: np.random.Generator | None = None,
                 w_fixed=None, w_random=None):
        self.dataset = dataset
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        stats = mlmm.compute_standardization(dataset.patients, spec)
        self.prep = PreparedData(dataset, spec, stats, w_fixed, w_random)
        self.spec = spec
        d = config.d
        self.vae_params: dict[str, vae.VaeParams] = {}
        for name in self.prep.instruments:
            self.vae_params[name] = vae.init_vae(self.prep.schemas[name], d, config.hidden, self.rng)
        self.adam = nn.init_adam(self._flat_arrays(), lr=config.lr)
        q = self.prep.designs[0].T.shape[1]
        self.log_phi = np.zeros(q * d)
        self.log_sigma = np.zeros(d)
        self.B = np.zeros((self.prep.designs[0].X.shape[1], d))
        self.blups = {pid: np.zeros((q, d)) for pid in self.prep.pids}
        self.final_latents: dict[str, np.ndarray] = {}
        self.epoch = 0
        self.trace: list[dict] = []
        self.diagnostics = {"refit_warnings": [], "recon_clamped": 0}
        self.maps = MixedMaps(self.prep, d, self.log_phi, self.log_sigma)

    # -- parameter plumbing -------------------------------------------------

    def _flat_arrays(self) -> list[np.ndarray]:
        arrays = []
        for name in self.prep.instruments:
            arrays += self.vae_params[name].arrays()
        return arrays

    def _set_flat_arrays(self, arrays: list[np.ndarray]) -> None:
        pos = 0
        for name in self.prep.instruments:
            n = len(self.vae_params[name].arrays())
            self.vae_params[name] = self.vae_params[name].replace_arrays(arrays[pos:pos + n])
            pos += n

    def draw_noise(self) -> list[dict[str, np.ndarray]]:
        """One eps array per instrument per Monte Carlo sample, in fixed order."""
        out = []
        for _ in range(self.config.mc_samples):
            eps = {}
            for name in self.prep.instruments:
                rows = self.prep.inst_rows[name]
                if rows is None:
                    continue
                eps[name] = self.rng.standard_normal((rows["fv"].size, self.config.d))
            out.append(eps)
        return out

    def _normalizers(self) -> tuple[float, float]:
        v_total = self.prep.n_visits_total
        o_total = self.prep.n_obs_total
        if self.config.normalizer == "literal":
            return 1.0 / (self.prep.n_patients * v_total), 1.0 / (self.prep.n_patients * o_total)
        return 1.0 / v_total, 1.0 / o_total

    # -- forward/backward ---------------------------------------------------

    def _encode_draw(self, eps: dict[str, np.ndarray], params=None):
        """Encoder forward for every observation; returns per-instrument state and z-bar."""
        params = params or self.vae_params
        d = self.config.d
        enc_state = {}
        zsum = np.zeros((self.prep.n_visits_total, d))
        for name in self.prep.instruments:
            rows = self.prep.inst_rows[name]
            if rows is None:
                continue
            h, tape = nn.mlp_forward(params[name].encoder, rows["bits"])
            mu, sigma = vae.split_heads(h, d)
            z = mu + sigma * eps[name]
            np.add.at(zsum, rows["fv"], z)
            enc_state[name] = {"tape": tape, "mu": mu, "sigma": sigma, "sraw": h[:, d:], "z": z}
        zbar = zsum / self.prep.counts[:, None]
        return enc_state, zbar

    def _mixed_forward(self, zbar: np.ndarray):
        """BLUE/BLUP prediction of the current draws plus the frozen-parameter L_ML."""
        maps, prep, d = self.maps, self.prep, self.config.d
        rhs = np.zeros(maps.pd)
        zvecs = []
        for i in range(prep.n_patients):
            sl = slice(prep.offsets[i], prep.offsets[i + 1])
            zv = zbar[sl].ravel(order="F")
            zvecs.append(zv)
            rhs += maps.K[i] @ zv
        vb = maps.solve_m(rhs)
        zhat = np.empty_like(zbar)
        vrs = []
        lml = 0.0
        gamma_raw = 0.0
        for i in range(prep.n_patients):
            sl = slice(prep.offsets[i], prep.offsets[i + 1])
            m = prep.m[i]
            r = zvecs[i] - maps.Xk[i] @ vb
            vr = maps.V[i] @ r
            vrs.append(vr)
            zhat_vec = maps.Xk[i] @ vb + maps.S[i] @ r
            zhat[sl] = zhat_vec.reshape((m, d), order="F")
            lml += 0.5 * (maps.logdet_v[i] - float(r @ vr) - m * d * LOG_2PI)
            diff = zhat_vec - zvecs[i]
            gamma_raw += float(diff @ diff)
        return zhat, vrs, vb, lml, gamma_raw

    def loss_parts(self, eps_list, params=None, want_grads: bool = False):
        """Loss components (averaged over MC samples), optionally with gradients."""
        params = params or self.vae_params
        cfg = self.config
        d = cfg.d
        prep = self.prep
        maps = self.maps
        norm1, norm2 = self._normalizers()
        comp_acc = {"recon": 0.0, "kl": 0.0, "gamma": 0.0, "eta": 0.0, "total": 0.0}
        grads_acc = [np.zeros_like(a) for a in self._flat_arrays()] if want_grads else None
        n_clamped = 0

        for eps in eps_list:
            enc_state, zbar = self._encode_draw(eps, params)
            zhat, vrs, vb, lml, gamma_raw = self._mixed_forward(zbar)

            recon_total = 0.0
            kl_total = 0.0
            dec_state = {}
            for name in prep.instruments:
                rows = prep.inst_rows[name]
                if rows is None:
                    continue
                vp = params[name]
                schema = prep.schemas[name]
                zin = zhat[rows["fv"]]
                h, tape = nn.mlp_forward(vp.decoder, zin)
                locs = h[:, :schema.n_items]
                flags = h[:, schema.n_items:]
                res = vae.ordinal_batch_loglik(schema, vp, locs, flags, rows["levels"],
                                               rows["missing"], rows["cannot"], with_grad=want_grads)
                if want_grads:
                    ll, clamped, d_locs, d_flags, d_base, d_incr = res
                    dec_state[name] = (tape, d_locs, d_flags, d_base, d_incr)
                else:
                    ll, clamped = res
                recon_total += ll
                n_clamped += clamped
                kl_total += float(np.sum(vae.kl_batch(enc_state[name]["mu"], enc_state[name]["sigma"])))

            comps = {
                "recon": norm2 * (-recon_total),
                "kl": norm2 * cfg.beta * kl_total,
                "gamma": norm1 * cfg.gamma * gamma_raw,
                "eta": -norm1 * cfg.eta * lml,
            }
            comps["total"] = comps["recon"] + comps["kl"] + comps["gamma"] + comps["eta"]
            for key in comp_acc:
                comp_acc[key] += comps[key] / len(eps_list)

            if not want_grads:
                continue

            # gradient w.r.t. zhat rows: reconstruction through the decoders plus the gamma term
            g_zhat = np.zeros_like(zhat)
            sample_grads: dict[str, list[np.ndarray]] = {}
            for name in prep.instruments:
                rows = prep.inst_rows[name]
                if rows is None:
                    continue
                vp = params[name]
                tape, d_locs, d_flags, d_base, d_incr = dec_state[name]
                grad_out = np.concatenate([d_locs, d_flags], axis=1) * (-norm2)
                dec_grads, g_zin = nn.mlp_backward(vp.decoder, tape, grad_out)
                np.add.at(g_zhat, rows["fv"], g_zin)
                sample_grads[name] = {
                    "dec": dec_grads.arrays(),
                    "cut": [d_base * (-norm2)] + [g * (-norm2) for g in d_incr],
                }
            g_zhat += norm1 * cfg.gamma * 2.0 * (zhat - zbar)

            # adjoint of zhat = Xk vb + S (z - Xk vb) back to the averaged draws
            g_zbar = norm1 * cfg.gamma * 2.0 * (zbar - zhat)
            a = np.zeros(maps.pd)
            t_list = []
            for i in range(prep.n_patients):
                sl = slice(prep.offsets[i], prep.offsets[i + 1])
                g_i = g_zhat[sl].ravel(order="F")
                t_i = maps.S[i].T @ g_i
                t_list.append(t_i)
                if maps.pd:
                    a += maps.Xk[i].T @ (g_i - t_i)
            b = maps.solve_m(a)
            for i in range(prep.n_patients):
                sl = slice(prep.offsets[i], prep.offsets[i + 1])
                m = prep.m[i]
                gz = t_list[i] + norm1 * cfg.eta * vrs[i]
                if maps.pd:
                    gz = gz + maps.K[i].T @ b
                g_zbar[sl] += gz.reshape((m, d), order="F")

            # distribute through the per-visit average and the reparameterization
            for name in prep.instruments:
                rows = prep.inst_rows[name]
                if rows is None:
                    continue
                st = enc_state[name]
                gz_rows = g_zbar[rows["fv"]] / prep.counts[rows["fv"]][:, None]
                dmu = gz_rows + norm2 * cfg.beta * st["mu"]
                dsigma = gz_rows * eps[name] + norm2 * cfg.beta * (st["sigma"] - 1.0 / st["sigma"])
                dsraw = dsigma * expit(st["sraw"])
                enc_grads, _ = nn.mlp_backward(params[name].encoder, st["tape"],
                                               np.concatenate([dmu, dsraw], axis=1))
                sample_grads[name]["enc"] = enc_grads.arrays()

            pos = 0
            for name in prep.instruments:
                sg = sample_grads.get(name)
                arrays = (sg["enc"] + sg["dec"] + sg["cut"]) if sg else \
                    [np.zeros_like(x) for x in params[name].arrays()]
                for arr in arrays:
                    grads_acc[pos] += arr / len(eps_list)
                    pos += 1

        self.diagnostics["recon_clamped"] += n_clamped
        if want_grads:
            return comp_acc, grads_acc
        return comp_acc

    # -- public steps ---------------------------------------------------------

    def mmvae_loss(self, rng: np.random.Generator | None = None) -> tuple[float, dict]:
        """Total loss and components on the full dataset with frozen mixed model."""
        if rng is not None:
            saved, self.rng = self.rng, rng
            eps_list = self.draw_noise()
            self.rng = saved
        else:
            eps_list = self.draw_noise()
        comps = self.loss_parts(eps_list)
        return comps["total"], comps

    def draw_latents(self) -> list[np.ndarray]:
        """One fresh latent trajectory draw per patient (a single MC sample)."""
        eps = self.draw_noise()[0]
        _, zbar = self._encode_draw(eps)
        return [zbar[self.prep.offsets[i]:self.prep.offsets[i + 1]]
                for i in range(self.prep.n_patients)]

    def train_epoch(self) -> dict:
        """Adam updates with the mixed model frozen, then a mixed-model refit."""
        cfg = self.config
        epoch_comps = []
        for _ in range(cfg.vae_updates_per_epoch):
            eps_list = self.draw_noise()
            comps, grads = self.loss_parts(eps_list, want_grads=True)
            arrays, self.adam = nn.adam_step_arrays(self.adam, self._flat_arrays(), grads)
            self._set_flat_arrays(arrays)
            epoch_comps.append(comps)

        latents = self.draw_latents()
        data = MixedModelData(self.prep.designs, latents, list(self.prep.pids))
        init = MixedModelParams(self.B, self.log_phi, self.log_sigma)
        try:
            res = mlmm.fit(data, init=init, method=cfg.criterion,
                           lbfgs_initial_step=cfg.lbfgs_initial_step)
            log_phi = np.clip(res.params.log_phi, np.log(cfg.refit_var_min),
                              np.log(cfg.refit_var_max))
            log_sigma = np.clip(res.params.log_sigma, np.log(cfg.refit_var_min),
                                np.log(cfg.refit_var_max))
            if np.array_equal(log_phi, res.params.log_phi) and \
                    np.array_equal(log_sigma, res.params.log_sigma):
                B, blups = res.params.B, res.blups
            else:
                # clamped: recompute the GLS coefficients at the clamped variances
                B = mlmm.blue(np.exp(log_phi), np.exp(log_sigma), data)
                blups = mlmm.blup(B, np.exp(log_phi), np.exp(log_sigma), data)
            self.B = B
            self.log_phi = log_phi
            self.log_sigma = log_sigma
            self.blups = {pid: u for pid, u in zip(self.prep.pids, blups)}
            self.final_latents = {pid: z for pid, z in zip(self.prep.pids, latents)}
            self.maps = MixedMaps(self.prep, cfg.d, self.log_phi, self.log_sigma)
        except ConditioningError as exc:
            self.diagnostics["refit_warnings"].append(f"epoch {self.epoch}: {exc}")
            self.final_latents = {pid: z for pid, z in zip(self.prep.pids, latents)}
        self.epoch += 1
        if epoch_comps:
            entry = {k: float(np.mean([c[k] for c in epoch_comps])) for k in epoch_comps[0]}
        else:
            entry = {k: float("nan") for k in ("recon", "kl", "gamma", "eta", "total")}
        entry["epoch"] = self.epoch
        self.trace.append(entry)
        return entry

    def run(self) -> TrainedModel:
        for _ in range(self.config.epochs):
            self.train_epoch()
        return self.model()

    def model(self) -> TrainedModel:
        return TrainedModel(
            config=self.config, spec=self.spec, stats=self.prep.stats,
            schemas=self.prep.schemas, vae=dict(self.vae_params),
            mm=MixedModelParams(self.B, self.log_phi, self.log_sigma),
            blups=dict(self.blups), pids=list(self.prep.pids),
            designs=list(self.prep.designs), fixed_labels=self.prep.fixed_labels,
            random_labels=self.prep.random_labels,
            final_latents=dict(self.final_latents), loss_trace=list(self.trace),
            diagnostics=dict(self.diagnostics))


def fit_joint(dataset: Dataset, spec: ModelSpec, config: TrainConfig,
              rng: np.random.Generator | None = None,
              w_fixed=None, w_random=None) -> TrainedModel:
    """Run the full alternating fit and return the trained model.

    Stopping is epoch-count based; the loss trace carries the per-epoch
    component breakdown so saturation can be inspected afterwards.
    ``w_fixed``/``w_random`` append per-patient knockoff columns to the
    fixed/random designs for the whole fit.
    """
    trainer = JointTrainer(dataset, spec, config, rng=rng, w_fixed=w_fixed, w_random=w_random)
    return trainer.run()
