"""Long-video quality metrics.

Optical flow comes from exhaustive block matching (SAD cost, ties broken
toward zero displacement) with a forward-backward occlusion check. Warp error
is the RMS pixel distance between a frame and its backward-warped successor
over non-occluded pixels; the optical-flow score is the mean flow magnitude;
the motion-aware warp error (MAWE) divides warp error by the flow score and a
fixed coefficient, so it rewards videos that are both consistent and rich in
motion. Distribution distances (FID/FVD proxies) use a fixed-seed random
convolutional feature network, frozen forever, in place of pretrained
backbones; every report labels them "-proxy" because absolute values are not
comparable with published numbers.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, MetricUndefinedError, ShapeError

STACK_LEN = 16  # frames per temporal feature stack


@dataclass(frozen=True)
class MetricConfig:
    c: float = 9.5                 # MAWE coefficient
    window: int = 40               # evaluation window length (frames)
    search_radius: int = 4
    block: int = 8
    feature_seed: int = 90210

    def __post_init__(self):
        if self.c <= 0:
            raise ConfigError("MAWE coefficient must be positive")
        if self.window < 2:
            raise ConfigError("evaluation window must span at least 2 frames")


@dataclass
class FlowField:
    u: np.ndarray          # (H, W) horizontal displacement, pixels
    v: np.ndarray          # (H, W) vertical displacement, pixels
    occlusion: np.ndarray  # (H, W) bool, True where round-trip check fails


@dataclass(frozen=True)
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray


def _to_unit(video: np.ndarray) -> np.ndarray:
    video = np.asarray(video)
    if video.dtype == np.uint8:
        return video.astype(np.float64) / 255.0
    return video.astype(np.float64)


# -- block-matching flow ---------------------------------------------------------


def _block_displacements(a: np.ndarray, b: np.ndarray, cfg: MetricConfig):
    """Best (dy, dx) per block of `a` matched in `b`. Frames are (C, H, W)."""
    c, h, w = a.shape
    bs, r = cfg.block, cfg.search_radius
    if h < bs or w < bs:
        raise ConfigError(f"frame ({h}x{w}) smaller than flow block ({bs})")
    ph = (-h) % bs
    pw = (-w) % bs
    if ph or pw:
        a = np.pad(a, ((0, 0), (0, ph), (0, pw)), mode="edge")
        b = np.pad(b, ((0, 0), (0, ph), (0, pw)), mode="edge")
    hh, ww = a.shape[1], a.shape[2]
    nby, nbx = hh // bs, ww // bs
    a_blocks = a.reshape(c, nby, bs, nbx, bs)

    bp = np.pad(b, ((0, 0), (r, r), (r, r)), mode="edge")
    # candidates sorted by displacement magnitude so argmin's first-minimum
    # rule breaks SAD ties toward zero motion
    cands = sorted(
        ((dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)),
        key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]),
    )
    sads = np.empty((len(cands), nby, nbx))
    for i, (dy, dx) in enumerate(cands):
        shifted = bp[:, r + dy:r + dy + hh, r + dx:r + dx + ww]
        diff = np.abs(a_blocks - shifted.reshape(c, nby, bs, nbx, bs))
        sads[i] = diff.sum(axis=(0, 2, 4))
    best = np.argmin(sads, axis=0)
    cand_arr = np.asarray(cands)
    return cand_arr[best, 0], cand_arr[best, 1], nby, nbx, hh, ww


def _expand(blockmap: np.ndarray, bs: int, h: int, w: int) -> np.ndarray:
    return np.repeat(np.repeat(blockmap, bs, axis=0), bs, axis=1)[:h, :w]


def estimate_flow(frame_a: np.ndarray, frame_b: np.ndarray,
                  cfg: MetricConfig) -> FlowField:
    """Per-pixel displacement taking content of `frame_a` to `frame_b`, plus
    an occlusion mask from the forward-backward consistency check."""
    a = _to_unit(frame_a)
    b = _to_unit(frame_b)
    if a.shape != b.shape:
        raise ShapeError(f"frame shapes differ: {a.shape} vs {b.shape}")
    h, w = a.shape[1], a.shape[2]
    bs = cfg.block

    dy_f, dx_f, *_ = _block_displacements(a, b, cfg)
    dy_b, dx_b, *_ = _block_displacements(b, a, cfg)
    u = _expand(dx_f, bs, h, w).astype(np.float64)
    v = _expand(dy_f, bs, h, w).astype(np.float64)
    ub = _expand(dx_b, bs, h, w).astype(np.float64)
    vb = _expand(dy_b, bs, h, w).astype(np.float64)

    ys, xs = np.mgrid[0:h, 0:w]
    ry = ys + v.astype(np.int64)
    rx = xs + u.astype(np.int64)
    outside = (ry < 0) | (ry >= h) | (rx < 0) | (rx >= w)
    ty = np.clip(ry, 0, h - 1)
    tx = np.clip(rx, 0, w - 1)
    round_u = u + ub[ty, tx]
    round_v = v + vb[ty, tx]
    occ = outside | (np.sqrt(round_u**2 + round_v**2) > 1.0)
    return FlowField(u=u, v=v, occlusion=occ)


def _warp_backward(frame_b: np.ndarray, flow: FlowField) -> np.ndarray:
    """Sample frame_b at p + flow(p): the motion-compensated successor."""
    c, h, w = frame_b.shape
    ys, xs = np.mgrid[0:h, 0:w]
    ty = np.clip(ys + flow.v.astype(np.int64), 0, h - 1)
    tx = np.clip(xs + flow.u.astype(np.int64), 0, w - 1)
    return frame_b[:, ty, tx]


def _pair_metrics(video: np.ndarray, cfg: MetricConfig):
    """(per-pair warp RMS or None, per-pair mean flow norm) for consecutive pairs."""
    vid = _to_unit(video)
    if vid.shape[0] < 2:
        raise ContractError(f"need at least 2 frames, got {vid.shape[0]}")
    warps: list[float | None] = []
    norms: list[float] = []
    for i in range(vid.shape[0] - 1):
        flow = estimate_flow(vid[i], vid[i + 1], cfg)
        norms.append(float(np.sqrt(flow.u**2 + flow.v**2).mean()))
        valid = ~flow.occlusion
        if not valid.any():
            warps.append(None)
            continue
        warped = _warp_backward(vid[i + 1], flow)
        sq = (vid[i] - warped) ** 2
        warps.append(float(np.sqrt(sq[:, valid].mean())))
    return warps, norms


def warp_error(video: np.ndarray, cfg: MetricConfig) -> float:
    """Mean over consecutive pairs of masked RMS distance between a frame and
    its backward-warped successor. All-occluded pairs contribute nothing."""
    warps, _ = _pair_metrics(video, cfg)
    usable = [x for x in warps if x is not None]
    if not usable:
        raise MetricUndefinedError("every frame pair is fully occluded")
    return float(np.mean(usable))


def optical_flow_score(video: np.ndarray, cfg: MetricConfig) -> float:
    """Mean flow-vector norm over all pixels and consecutive pairs."""
    _, norms = _pair_metrics(video, cfg)
    return float(np.mean(norms))


def mawe(video: np.ndarray, cfg: MetricConfig) -> float:
    """warp_error / (c * optical_flow_score); a static, unchanged video scores
    0 by convention, while zero motion with nonzero warp error is undefined."""
    warps, norms = _pair_metrics(video, cfg)
    usable = [x for x in warps if x is not None]
    if not usable:
        raise MetricUndefinedError("every frame pair is fully occluded")
    w = float(np.mean(usable))
    ofs = float(np.mean(norms))
    if ofs < 1e-6:
        if w < 1e-6:
            return 0.0
        raise MetricUndefinedError(
            f"zero optical flow with nonzero warp error ({w:.3g})"
        )
    return w / (cfg.c * ofs)


# -- frozen feature network ----------------------------------------------------------


def _conv_s2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 stride-2 convolution with zero padding of 1, float64."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="constant")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    windows = windows[:, :, ::2, ::2]  # stride 2
    out = np.einsum("bchwij,ocij->bohw", windows, w, optimize=True)
    return out + b[None, :, None, None]


class VideoFeatureNet:
    """Small fixed-seed convolutional embedder, frozen forever.

    Frames enter as finite-difference gradients (palette-invariant), pass a
    3-layer random conv stack, and are summarized by per-layer channel
    mean/std statistics. The network's response to a zero input is subtracted
    (an input-independent anchor) and a constant homogeneous coordinate is
    appended before unit normalization, so a vector's direction encodes how
    far the input's texture statistics sit from neutral: renders of any
    palette stay near the constant axis while broadband noise swings far into
    the statistics subspace. Output vectors are unit-norm.
    """

    WIDTHS = (16, 32, 64)
    HOMOGENEOUS = 4.0

    def __init__(self, channels: int, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence((seed, channels)))
        self.channels = channels
        self.weights = []
        c_in = 2 * channels  # vertical + horizontal gradient planes
        for c_out in self.WIDTHS:
            fan = c_in * 9
            w = rng.normal(0.0, np.sqrt(2.0 / fan), size=(c_out, c_in, 3, 3))
            b = rng.normal(0.0, 0.1, size=c_out)
            self.weights.append((w, b))
            c_in = c_out
        self._anchors: dict[tuple[int, int], np.ndarray] = {}

    @staticmethod
    def _gradients(x: np.ndarray) -> np.ndarray:
        gy = np.diff(x, axis=2, append=x[:, :, -1:, :])
        gx = np.diff(x, axis=3, append=x[:, :, :, -1:])
        return np.concatenate([gy, gx], axis=1)

    def _stats(self, g: np.ndarray) -> np.ndarray:
        stats = []
        x = g
        for i, (w, b) in enumerate(self.weights):
            x = _conv_s2(x, w, b)
            if i < len(self.weights) - 1:
                x = np.maximum(x, 0.0)
            stats.append(x.mean(axis=(2, 3)))
            stats.append(x.std(axis=(2, 3)))
        return np.concatenate(stats, axis=1)

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        x = _to_unit(batch)
        hw = (x.shape[2], x.shape[3])
        if hw not in self._anchors:
            zero = np.zeros((1, 2 * self.channels) + hw)
            self._anchors[hw] = self._stats(zero)[0]
        feats = self._stats(self._gradients(x)) - self._anchors[hw][None, :]
        hom = np.full((feats.shape[0], 1), self.HOMOGENEOUS)
        feats = np.concatenate([feats, hom], axis=1)
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        return feats / np.maximum(norms, 1e-12)

    def checksum(self) -> str:
        crc = 0
        for w, b in self.weights:
            crc = zlib.crc32(np.ascontiguousarray(w).tobytes(), crc)
            crc = zlib.crc32(np.ascontiguousarray(b).tobytes(), crc)
        return f"{crc:08x}"


_NET_CACHE: dict[tuple[int, int], VideoFeatureNet] = {}


def _net(channels: int, seed: int) -> VideoFeatureNet:
    key = (channels, seed)
    if key not in _NET_CACHE:
        _NET_CACHE[key] = VideoFeatureNet(channels, seed)
    return _NET_CACHE[key]


def extractor_checksum(channels: int, seed: int) -> str:
    frame_net = _net(channels, seed)
    stack_net = _net(channels * STACK_LEN, seed)
    return f"{frame_net.checksum()}-{stack_net.checksum()}"


def video_features(video: np.ndarray, extractor_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(per-frame features (L, D), per-16-frame-stack features (K, D)).

    Stacks are consecutive and non-overlapping; a video shorter than 16
    frames yields an empty stack array.
    """
    vid = _to_unit(video)
    l, c = vid.shape[0], vid.shape[1]
    frame_feats = _net(c, extractor_seed)(vid)
    k = l // STACK_LEN
    if k == 0:
        return frame_feats, np.zeros((0, frame_feats.shape[1]))
    stacked = vid[:k * STACK_LEN].reshape(k, STACK_LEN * c, vid.shape[2], vid.shape[3])
    stack_feats = _net(STACK_LEN * c, extractor_seed)(stacked)
    return frame_feats, stack_feats


def background_consistency_from_features(feats: np.ndarray) -> float:
    """Average of (i) mean cosine similarity of consecutive frame features and
    (ii) mean similarity of the first frame to every LATER frame."""
    if feats.shape[0] < 2:
        raise ContractError("need at least 2 frames")
    consecutive = float(np.mean(np.sum(feats[:-1] * feats[1:], axis=1)))
    to_first = float(np.mean(feats[1:] @ feats[0]))
    return (consecutive + to_first) / 2.0


def background_consistency(video: np.ndarray, cfg: MetricConfig) -> float:
    feats, _ = video_features(video, cfg.feature_seed)
    return background_consistency_from_features(feats)


# -- Frechet statistics ----------------------------------------------------------------


def feature_stats(feats: np.ndarray) -> FeatureStats:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ContractError(f"need an (N, D) feature matrix, got {feats.shape}")
    mu = feats.mean(axis=0)
    if feats.shape[0] == 1:
        sigma = np.zeros((feats.shape[1], feats.shape[1]))
    else:
        sigma = np.cov(feats, rowvar=False)
    return FeatureStats(mu=mu, sigma=np.atleast_2d(sigma))


def _psd_sqrt(m: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    if vals.min() < -tol:
        raise ContractError(f"matrix has eigenvalue {vals.min():.3g} below -{tol}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """Squared Frechet distance between the two Gaussian fits:
    |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})."""
    if a.mu.shape != b.mu.shape:
        raise ShapeError(f"feature dims differ: {a.mu.shape} vs {b.mu.shape}")
    diff = float(np.sum((a.mu - b.mu) ** 2))
    sa_half = _psd_sqrt(a.sigma)
    inner = _psd_sqrt(sa_half @ b.sigma @ sa_half)
    trace_term = float(np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * np.trace(inner))
    return max(diff + trace_term, 0.0)


# -- windowed protocol -------------------------------------------------------------------


def windowed_curves(video: np.ndarray, cfg: MetricConfig,
                    ref_frames: FeatureStats, ref_stacks: FeatureStats | None) -> list[dict]:
    """Metric values at frame marks window, 2*window, ...: each mark evaluates
    the previous `window` frames against the reference statistics."""
    l = np.asarray(video).shape[0]
    if l < cfg.window:
        raise ContractError(f"video has {l} frames, below one window ({cfg.window})")
    curves = []
    for mark in range(cfg.window, l + 1, cfg.window):
        chunk = video[mark - cfg.window:mark]
        frame_feats, stack_feats = video_features(chunk, cfg.feature_seed)
        point = {
            "frame": mark,
            "fid_proxy": frechet_distance(feature_stats(frame_feats), ref_frames),
            "mawe": mawe(chunk, cfg),
            "background_consistency": background_consistency_from_features(frame_feats),
        }
        if ref_stacks is not None and stack_feats.shape[0] >= 1:
            point["fvd_proxy"] = frechet_distance(feature_stats(stack_feats), ref_stacks)
        else:
            point["fvd_proxy"] = None
        curves.append(point)
    return curves
