"""Per-instrument variational autoencoder pieces.

Each measurement instrument gets its own encoder and decoder network. The
encoder maps thermometer-encoded item scores to a diagonal Gaussian
posterior; the decoder maps a latent vector to per-item ordinal-logistic
distributions (location from the network, per-item cutpoints as standalone
learnable parameters) plus a Bernoulli head for items that carry a
cannot-perform indicator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import nn
from .errors import ShapeError, ValidationError

SIGMA_FLOOR = 1e-4
PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = float(np.log(PROB_FLOOR))


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class ItemSpec:
    """One ordinal test item: number of score levels, optional cannot-perform
    indicator, and whether it counts toward the official sum score."""

    levels: int
    has_flag: bool = False
    official: bool = True

    def __post_init__(self):
        if not 2 <= self.levels <= 6:
            raise ValidationError(f"item level count must be in [2, 6], got {self.levels}")


@dataclass(frozen=True)
class InstrumentSchema:
    name: str
    items: tuple[ItemSpec, ...]

    def __post_init__(self):
        if not self.items:
            raise ValidationError(f"instrument {self.name!r} has no items")

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def encoded_width(self) -> int:
        return sum(it.levels - 1 + int(it.has_flag) for it in self.items)

    @property
    def flagged_idx(self) -> tuple[int, ...]:
        return tuple(j for j, it in enumerate(self.items) if it.has_flag)

    @property
    def max_sum_score(self) -> int:
        """Maximum official sum score (unofficial items excluded)."""
        return sum(it.levels - 1 for it in self.items if it.official)


@dataclass(frozen=True)
class EncodedObservation:
    """One instrument assessment at one visit, in encoder-ready form.

    ``bits`` is the zero-filled thermometer encoding (missing items
    contribute all-zero blocks); ``levels``/``missing``/``cannot`` keep the
    raw item state for the reconstruction likelihood.
    """

    instrument: str
    bits: np.ndarray
    levels: np.ndarray
    missing: np.ndarray
    cannot: np.ndarray


@dataclass(frozen=True)
class VariationalPosterior:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ShapeError("posterior mean and scale shapes differ")
        if not np.isfinite(self.sigma).all() or (self.sigma <= 0).any():
            raise ValidationError("posterior scale must be strictly positive and finite")


@dataclass(frozen=True)
class OrdinalDecoderOutput:
    """Per-item ordinal-logistic parameters produced by one decoder call."""

    schema: InstrumentSchema
    locations: np.ndarray                 # (n_items,)
    cutpoints: tuple[np.ndarray, ...]     # per item, strictly increasing, length levels-1
    flag_logits: np.ndarray               # (n_flagged,) in flagged-item order


@dataclass(frozen=True)
class VaeParams:
    """Encoder/decoder networks plus cutpoint parameters for one instrument.

    Cutpoints are per-item and independent of the latent input: the first
    cutpoint is ``cut_base[j]`` and subsequent ones add softplus of the raw
    increments, which keeps them strictly increasing for any parameter value.
    """

    encoder: nn.MlpParams
    decoder: nn.MlpParams
    cut_base: np.ndarray
    cut_incr: tuple[np.ndarray, ...]

    def arrays(self) -> list[np.ndarray]:
        return self.encoder.arrays() + self.decoder.arrays() + [self.cut_base] + list(self.cut_incr)

    def replace_arrays(self, arrays: list[np.ndarray]) -> "VaeParams":
        ne = len(self.encoder.arrays())
        nd = len(self.decoder.arrays())
        enc = nn.MlpParams.from_arrays(arrays[:ne])
        dec = nn.MlpParams.from_arrays(arrays[ne:ne + nd])
        cut_base = arrays[ne + nd]
        cut_incr = tuple(arrays[ne + nd + 1:])
        return VaeParams(enc, dec, cut_base, cut_incr)


def init_vae(schema: InstrumentSchema, d: int, hidden, rng: np.random.Generator) -> VaeParams:
    """Fresh parameters for one instrument.

    Encoder: encoded_width -> hidden -> 2d (mean head and raw-scale head).
    Decoder: d -> hidden -> n_items + n_flagged (locations, then flag logits).
    Cutpoints start evenly spread over [-1.5, 1.5].
    """
    hidden = list(hidden)
    encoder = nn.init_mlp([schema.encoded_width] + hidden + [2 * d], rng)
    decoder = nn.init_mlp([d] + hidden + [schema.n_items + len(schema.flagged_idx)], rng)
    base = np.zeros(schema.n_items)
    incr = []
    for j, item in enumerate(schema.items):
        c = item.levels
        if c == 2:
            base[j] = 0.0
            incr.append(np.zeros(0))
        else:
            spacing = 3.0 / (c - 2)
            base[j] = -1.5
            # softplus(raw) == spacing
            incr.append(np.full(c - 2, np.log(np.expm1(spacing))))
    return VaeParams(encoder, decoder, base, tuple(incr))


# ---------------------------------------------------------------------------
# thermometer encoding
# ---------------------------------------------------------------------------

def thermometer_encode(level: int, level_count: int) -> np.ndarray:
    """Level c of C maps to a (C-1)-vector with the first c entries set to 1."""
    if not 0 <= level <= level_count - 1:
        raise ValidationError(f"level {level} outside [0, {level_count - 1}]")
    out = np.zeros(level_count - 1)
    out[:level] = 1.0
    return out


def thermometer_decode(bits: np.ndarray) -> int:
    return int(np.rint(np.sum(bits)))


def encode_inputs(schema: InstrumentSchema, levels: np.ndarray, missing: np.ndarray,
                  cannot: np.ndarray) -> np.ndarray:
    """Batched encoder inputs: thermometer blocks plus flag bits, missing items zero-filled.

    ``levels``/``missing``/``cannot`` are (N, n_items) arrays.
    """
    levels = np.atleast_2d(np.asarray(levels))
    missing = np.atleast_2d(np.asarray(missing, dtype=bool))
    cannot = np.atleast_2d(np.asarray(cannot, dtype=bool))
    n = levels.shape[0]
    out = np.zeros((n, schema.encoded_width))
    col = 0
    for j, item in enumerate(schema.items):
        c = item.levels
        lev = levels[:, j]
        if ((lev < 0) | (lev > c - 1)).any():
            raise ValidationError(f"item {j} of {schema.name!r}: level outside [0, {c - 1}]")
        block = (np.arange(c - 1)[None, :] < lev[:, None]).astype(float)
        block[missing[:, j]] = 0.0
        out[:, col:col + c - 1] = block
        col += c - 1
        if item.has_flag:
            out[:, col] = (cannot[:, j] & ~missing[:, j]).astype(float)
            col += 1
    return out


def make_observation(schema: InstrumentSchema, levels, missing=None, cannot=None) -> EncodedObservation:
    levels = np.asarray(levels, dtype=int)
    if levels.shape != (schema.n_items,):
        raise ShapeError(f"expected {schema.n_items} item levels, got {levels.shape}")
    missing = np.zeros(schema.n_items, bool) if missing is None else np.asarray(missing, bool)
    cannot = np.zeros(schema.n_items, bool) if cannot is None else np.asarray(cannot, bool)
    bits = encode_inputs(schema, levels[None, :], missing[None, :], cannot[None, :])[0]
    return EncodedObservation(schema.name, bits, levels, missing, cannot)


# ---------------------------------------------------------------------------
# encoder side
# ---------------------------------------------------------------------------

def split_heads(h: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Raw network output -> (mu, sigma) with softplus + floor on the scale head."""
    mu = h[..., :d]
    sigma = softplus(h[..., d:]) + SIGMA_FLOOR
    return mu, sigma


def encode(schema: InstrumentSchema, params: VaeParams, obs: EncodedObservation) -> VariationalPosterior:
    """Variational posterior for one observation."""
    if obs.bits.shape != (schema.encoded_width,):
        raise ShapeError(f"encoded width {obs.bits.shape} does not match schema ({schema.encoded_width})")
    h, _ = nn.mlp_forward(params.encoder, obs.bits)
    d = params.encoder.n_out // 2
    mu, sigma = split_heads(h, d)
    return VariationalPosterior(mu, sigma)


def reparameterize(post: VariationalPosterior, eps: np.ndarray) -> np.ndarray:
    """z = mu + sigma * eps, with caller-supplied standard-normal noise."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != post.mu.shape:
        raise ShapeError("noise shape does not match posterior")
    return post.mu + post.sigma * eps


def kl_std_normal(post: VariationalPosterior) -> float:
    """Closed-form KL(q || N(0, I)) = 0.5 sum(mu^2 + sigma^2 - 1 - log sigma^2)."""
    mu, sigma = post.mu, post.sigma
    return float(0.5 * np.sum(mu * mu + sigma * sigma - 1.0 - 2.0 * np.log(sigma)))


def kl_batch(mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    return 0.5 * np.sum(mu * mu + sigma * sigma - 1.0 - 2.0 * np.log(sigma), axis=-1)


# ---------------------------------------------------------------------------
# decoder side
# ---------------------------------------------------------------------------

def build_cutpoints(params: VaeParams, schema: InstrumentSchema) -> tuple[np.ndarray, ...]:
    cuts = []
    for j in range(schema.n_items):
        incr = softplus(params.cut_incr[j])
        cuts.append(params.cut_base[j] + np.concatenate([[0.0], np.cumsum(incr)]))
    return tuple(cuts)


def decode_ordinal(schema: InstrumentSchema, params: VaeParams, z: np.ndarray) -> OrdinalDecoderOutput:
    """Decoder distributions at a single latent point."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (params.decoder.n_in,):
        raise ShapeError(f"latent point shape {z.shape} does not match decoder input")
    if not np.isfinite(z).all():
        raise ValidationError("non-finite latent input")
    h, _ = nn.mlp_forward(params.decoder, z)
    locs = h[:schema.n_items]
    flags = h[schema.n_items:]
    return OrdinalDecoderOutput(schema, locs, build_cutpoints(params, schema), flags)


def item_probs(out: OrdinalDecoderOutput, j: int) -> np.ndarray:
    """Category probabilities P(c) = sigmoid(k_c - loc) - sigmoid(k_{c-1} - loc)."""
    kappa = out.cutpoints[j]
    cdf = np.concatenate([[0.0], expit(kappa - out.locations[j]), [1.0]])
    return np.diff(cdf)


def all_item_probs(out: OrdinalDecoderOutput) -> list[np.ndarray]:
    return [item_probs(out, j) for j in range(out.schema.n_items)]


def recon_loglik(out: OrdinalDecoderOutput, obs: EncodedObservation) -> float:
    """Reconstruction log-likelihood of one observation.

    Non-missing items contribute the ordinal log-probability of the observed
    level; flagged items add a Bernoulli term for the cannot-perform
    indicator, and a fired flag replaces the ordinal term. Missing items
    contribute nothing. Probabilities are clamped at 1e-12 before the log.
    """
    ll, _ = recon_loglik_full(out, obs)
    return ll


def recon_loglik_full(out: OrdinalDecoderOutput, obs: EncodedObservation) -> tuple[float, int]:
    schema = out.schema
    if obs.levels.shape != (schema.n_items,):
        raise ShapeError("observation does not match schema")
    ll = 0.0
    clamped = 0
    flag_pos = {j: r for r, j in enumerate(schema.flagged_idx)}
    for j, item in enumerate(schema.items):
        if obs.missing[j]:
            continue
        fired = False
        if item.has_flag:
            pf = expit(out.flag_logits[flag_pos[j]])
            fired = bool(obs.cannot[j])
            p = pf if fired else 1.0 - pf
            if p < PROB_FLOOR:
                ll += LOG_PROB_FLOOR
                clamped += 1
            else:
                ll += float(np.log(p))
        if not fired:
            p = item_probs(out, j)[obs.levels[j]]
            if p < PROB_FLOOR:
                ll += LOG_PROB_FLOOR
                clamped += 1
            else:
                ll += float(np.log(p))
    return ll, clamped


def expected_scores(out: OrdinalDecoderOutput) -> np.ndarray:
    """Per-item expected score sum_c c P(c); flagged items are scaled by the
    probability of being able to perform (a fired flag means score zero)."""
    schema = out.schema
    scores = np.empty(schema.n_items)
    flag_pos = {j: r for r, j in enumerate(schema.flagged_idx)}
    for j, item in enumerate(schema.items):
        e = float(np.arange(item.levels) @ item_probs(out, j))
        if item.has_flag:
            e *= 1.0 - float(expit(out.flag_logits[flag_pos[j]]))
        scores[j] = e
    return scores


# ---------------------------------------------------------------------------
# batched ordinal likelihood with gradients (training path)
# ---------------------------------------------------------------------------

def ordinal_batch_loglik(schema: InstrumentSchema, params: VaeParams,
                         locs: np.ndarray, flags: np.ndarray,
                         levels: np.ndarray, missing: np.ndarray, cannot: np.ndarray,
                         with_grad: bool = False):
    """Reconstruction log-likelihood over a batch, optionally with gradients.

    ``locs`` is (N, n_items), ``flags`` (N, n_flagged). Returns
    (ll_sum, n_clamped) or, with gradients,
    (ll_sum, n_clamped, d_locs, d_flags, d_cut_base, d_cut_incr).

    Gradients in clamped (underflow) regions are set to zero, matching the
    piecewise-constant clamped objective.
    """
    n = locs.shape[0]
    cuts = build_cutpoints(params, schema)
    ll = 0.0
    clamped = 0
    d_locs = np.zeros_like(locs) if with_grad else None
    d_flags = np.zeros_like(flags) if with_grad else None
    d_base = np.zeros(schema.n_items) if with_grad else None
    d_incr = [np.zeros_like(a) for a in params.cut_incr] if with_grad else None
    flag_pos = {j: r for r, j in enumerate(schema.flagged_idx)}

    for j, item in enumerate(schema.items):
        obs_mask = ~missing[:, j]
        if not obs_mask.any():
            continue
        fired = cannot[:, j] & obs_mask
        if item.has_flag:
            r = flag_pos[j]
            pf = expit(flags[:, r])
            pflag = np.where(cannot[:, j], pf, 1.0 - pf)
            pflag = np.where(obs_mask, pflag, 1.0)
            low = pflag < PROB_FLOOR
            clamped += int(np.sum(low & obs_mask))
            ll += float(np.sum(np.where(low, LOG_PROB_FLOOR, np.log(np.maximum(pflag, PROB_FLOOR)))[obs_mask]))
            if with_grad:
                g = np.where(cannot[:, j], 1.0 - pf, -pf)  # d log p / d logit
                g = np.where(obs_mask & ~low, g, 0.0)
                d_flags[:, r] += g
        ordinal_mask = obs_mask & ~fired
        if not ordinal_mask.any():
            continue
        kappa = cuts[j]
        lev = levels[:, j]
        c_hi = np.minimum(lev, item.levels - 2)  # index into kappa for upper bound
        s_hi = np.where(lev <= item.levels - 2, expit(kappa[c_hi] - locs[:, j]), 1.0)
        c_lo = np.maximum(lev - 1, 0)
        s_lo = np.where(lev >= 1, expit(kappa[c_lo] - locs[:, j]), 0.0)
        p = s_hi - s_lo
        low = p < PROB_FLOOR
        clamped += int(np.sum(low & ordinal_mask))
        ll += float(np.sum(np.where(low, LOG_PROB_FLOOR, np.log(np.maximum(p, PROB_FLOOR)))[ordinal_mask]))
        if with_grad:
            active = ordinal_mask & ~low
            inv_p = np.where(active, 1.0 / np.maximum(p, PROB_FLOOR), 0.0)
            dhi = np.where(lev <= item.levels - 2, s_hi * (1.0 - s_hi), 0.0) * inv_p
            dlo = np.where(lev >= 1, s_lo * (1.0 - s_lo), 0.0) * inv_p
            d_locs[:, j] += -dhi + dlo
            # accumulate per-cutpoint gradients, then fold into base/increments
            g_kappa = np.zeros(item.levels - 1)
            np.add.at(g_kappa, c_hi, np.where(lev <= item.levels - 2, dhi, 0.0))
            np.add.at(g_kappa, c_lo, np.where(lev >= 1, -dlo, 0.0))
            d_base[j] += g_kappa.sum()
            if item.levels > 2:
                # kappa_m depends on incr_u for u <= m-1: suffix sums of g_kappa
                suffix = np.cumsum(g_kappa[::-1])[::-1]
                d_incr[j] += expit(params.cut_incr[j]) * suffix[1:]
    if with_grad:
        return ll, clamped, d_locs, d_flags, d_base, d_incr
    return ll, clamped


def expected_scores_batch(schema: InstrumentSchema, params: VaeParams,
                          locs: np.ndarray, flags: np.ndarray) -> np.ndarray:
    """(N, n_items) expected scores for a batch of decoder outputs."""
    n = locs.shape[0]
    cuts = build_cutpoints(params, schema)
    out = np.empty((n, schema.n_items))
    flag_pos = {j: r for r, j in enumerate(schema.flagged_idx)}
    for j, item in enumerate(schema.items):
        cdf = expit(cuts[j][None, :] - locs[:, j][:, None])
        cdf = np.concatenate([np.zeros((n, 1)), cdf, np.ones((n, 1))], axis=1)
        probs = np.diff(cdf, axis=1)
        e = probs @ np.arange(item.levels)
        if item.has_flag:
            e = e * (1.0 - expit(flags[:, flag_pos[j]]))
        out[:, j] = e
    return out
