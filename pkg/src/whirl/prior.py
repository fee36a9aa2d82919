"""Turn a hand track into a robot-frame action prior.

Contact labels are smoothed with a Savitzky-Golay filter over their one-hot
encoding, the longest contact run gives the interaction window, waypoints are
sampled around the window's hand positions, and ``f_map`` deprojects them with
the depth reading and moves them into the robot frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .action import Prior
from .demo import N_CONTACT_CLASSES, ContactClass, DemoVideo
from .sim import Camera


class ExtractionError(RuntimeError):
    pass


class MappingError(ValueError):
    pass


def savgol_coefficients(window: int, polyorder: int) -> np.ndarray:
    """Least-squares smoothing weights for the centre sample of a ``window``-point frame.

    The weights are symmetric, so they serve equally for convolution and correlation.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 3, got {window}")
    if not 0 <= polyorder < window:
        raise ValueError(f"polyorder must satisfy 0 <= polyorder < window, got {polyorder}")
    half = window // 2
    offsets = np.arange(-half, half + 1, dtype=float)
    A = np.vander(offsets, polyorder + 1, increasing=True)
    # row 0 of the pseudo-inverse evaluates the fitted polynomial at offset 0
    return np.linalg.pinv(A)[0]


def savgol_filter(x: np.ndarray, window: int, polyorder: int) -> np.ndarray:
    """Filter along axis 0.

    The first and last ``window // 2`` samples take the value of the polynomial
    fitted to the first (last) full window instead of using padding.
    """
    x = np.asarray(x, dtype=float)
    if len(x) < window:
        raise ValueError(f"sequence of length {len(x)} is shorter than window {window}")
    w = savgol_coefficients(window, polyorder)
    half = window // 2
    n = len(x)
    out = np.zeros_like(x)
    for k in range(window):
        out[half:n - half] += w[k] * x[k:n - 2 * half + k]
    offsets = np.arange(-half, half + 1, dtype=float)
    fit = np.linalg.pinv(np.vander(offsets, polyorder + 1, increasing=True))
    edge = np.vander(offsets, polyorder + 1, increasing=True) @ fit  # window values of the fitted polynomial
    out[:half] = np.tensordot(edge[:half], x[:window], axes=1)
    out[n - half:] = np.tensordot(edge[half + 1:], x[n - window:], axes=1)
    return out


def smooth_contacts(contacts: Sequence[int], window: int = 7, polyorder: int = 2) -> np.ndarray:
    contacts = np.asarray(contacts, dtype=int)
    onehot = np.eye(N_CONTACT_CLASSES)[contacts]
    filtered = savgol_filter(onehot, window, polyorder)
    best = filtered.max(axis=1)
    keep = filtered[np.arange(len(contacts)), contacts] >= best - 1e-12
    return np.where(keep, contacts, filtered.argmax(axis=1))


def count_transitions(seq: Sequence[int]) -> int:
    seq = np.asarray(seq)
    return int(np.count_nonzero(seq[1:] != seq[:-1]))


@dataclass(frozen=True)
class InteractionWindow:
    t_interaction: int
    t_end: int
    segment_contact: ContactClass


def detect_window(smoothed: Sequence[int], min_len: int = 5) -> InteractionWindow:
    """Longest run of one non-``none`` class; ties go to the earliest run."""
    seq = np.asarray(smoothed, dtype=int)
    best: Optional[tuple[int, int]] = None
    start = 0
    for t in range(1, len(seq) + 1):
        if t == len(seq) or seq[t] != seq[start]:
            length = t - start
            if seq[start] != ContactClass.NONE and length >= min_len:
                if best is None or length > best[1] - best[0] + 1:
                    best = (start, t - 1)
            start = t
    if best is None:
        raise ExtractionError("no interaction detected")
    return InteractionWindow(best[0], best[1], ContactClass(int(seq[best[0]])))


@dataclass(frozen=True)
class HandPrior:
    """Camera-frame waypoints with the depth reading for each, plus the grasp schedule."""

    h_interaction: np.ndarray
    h_mid: tuple[np.ndarray, ...]
    h_end: np.ndarray
    depths: tuple[float, ...]  # interaction, mids..., end
    theta_hand: np.ndarray
    o: np.ndarray
    window: InteractionWindow
    T: int

    def points(self) -> list[np.ndarray]:
        return [self.h_interaction, *self.h_mid, self.h_end]


def _circular_mean(angles: np.ndarray) -> np.ndarray:
    return np.arctan2(np.sin(angles).mean(axis=0), np.cos(angles).mean(axis=0))


def _lerp(a: np.ndarray, t: float) -> np.ndarray:
    i = int(np.floor(t))
    if i >= len(a) - 1:
        return np.array(a[-1], dtype=float)
    f = t - i
    return (1.0 - f) * a[i] + f * a[i + 1]


def extract_hand_prior(demo: DemoVideo, window: InteractionWindow, rng_seed=None, sigma_wp: float = 0.01,
                       mid_fracs: Sequence[float] = (0.5,)) -> HandPrior:
    rng = np.random.default_rng(rng_seed)
    ti, te = window.t_interaction, window.t_end
    if not 0 <= ti < te < demo.T:
        raise ExtractionError(f"window ({ti}, {te}) invalid for a demo of {demo.T} frames")
    n_i = rng.normal(0.0, sigma_wp, 3) if sigma_wp > 0 else np.zeros(3)
    n_e = rng.normal(0.0, sigma_wp, 3) if sigma_wp > 0 else np.zeros(3)
    h_int = demo.h[ti] + n_i
    h_end = demo.h[te] + n_e
    mids, mid_depths = [], []
    for f in mid_fracs:
        t = ti + f * (te - ti)
        mids.append(_lerp(demo.h, t))
        mid_depths.append(float(_lerp(demo.depth, t)))
    o = np.zeros(demo.T, dtype=int)
    o[ti:te + 1] = 1
    return HandPrior(
        h_interaction=h_int,
        h_mid=tuple(mids),
        h_end=h_end,
        depths=(float(demo.depth[ti] + n_i[2]), *mid_depths, float(demo.depth[te] + n_e[2])),
        theta_hand=_circular_mean(demo.theta_hand[ti:te + 1]),
        o=o,
        window=window,
        T=demo.T,
    )


def identity_remap(theta_hand: np.ndarray) -> np.ndarray:
    return np.asarray(theta_hand, dtype=float)


def _to_robot(camera: Camera, h: np.ndarray, depth: float) -> np.ndarray:
    if h[2] <= 0 or depth <= 0:
        raise MappingError("hand point lies behind the camera")
    u, v = camera.project(h)
    return camera.to_robot(camera.deproject(u, v, depth))


def f_map(hand: HandPrior, camera: Camera, remap: Callable[[np.ndarray], np.ndarray] = identity_remap) -> Prior:
    """Map camera-frame hand quantities to a robot-frame ``Prior``."""
    ws = [_to_robot(camera, np.asarray(h, dtype=float), d) for h, d in zip(hand.points(), hand.depths)]
    denom = max(hand.T - 1, 1)
    return Prior(
        w_interaction=ws[0],
        w_mid=tuple(ws[1:-1]),
        w_end=ws[-1],
        theta_ypr=tuple(remap(hand.theta_hand)),
        g=0.0 if hand.o.any() else 1.0,
        t_close_frac=hand.window.t_interaction / denom,
        t_open_frac=hand.window.t_end / denom,
    )


def f_map_inverse(prior: Prior, camera: Camera) -> list[np.ndarray]:
    """Camera-frame points corresponding to the prior's waypoints."""
    return [camera.to_camera(w) for w in prior.waypoints()]


@dataclass(frozen=True)
class ExtractionConfig:
    window: int = 7
    polyorder: int = 2
    min_len: int = 5
    sigma_wp: float = 0.01
    mid_fracs: tuple[float, ...] = (0.5,)


def detect(demo: DemoVideo, cfg: ExtractionConfig = ExtractionConfig()) -> InteractionWindow:
    smoothed = smooth_contacts(demo.contact, cfg.window, cfg.polyorder)
    return detect_window(smoothed, cfg.min_len)


def extract_prior(demo: DemoVideo, camera: Camera, cfg: ExtractionConfig = ExtractionConfig(),
                  seed=None, sigma_wp: Optional[float] = None,
                  window: Optional[InteractionWindow] = None) -> Prior:
    """Full pipeline from hand detections to a robot prior."""
    window = detect(demo, cfg) if window is None else window
    s = cfg.sigma_wp if sigma_wp is None else sigma_wp
    hand = extract_hand_prior(demo, window, seed, s, cfg.mid_fracs)
    return f_map(hand, camera)
