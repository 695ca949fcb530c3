"""Partial-to-complete pipeline around a pluggable distance predictor.

resample -> select anchors -> encode -> predict distances -> decode.

The predictor only ever sees distances, so any predictor that is a function of
the partial distance matrix yields output that moves rigidly with the input.
"""

from __future__ import annotations

import json
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .anchors import (
    DEFAULT_KNN,
    DEFAULT_RADIUS,
    DEFAULT_THRESHOLD,
    AnchorSet,
    deterministic_fps,
    normalize_strategy,
    select_anchors,
)
from .cloud import PointCloud
from .codec import (
    DistanceMatrix,
    SolverOptions,
    decode,
    encode,
    read_escd,
    write_escd,
)
from .errors import AnchorPCError, BadExternalOutput, ConfigError, ExternalFailed, FormatError


@dataclass(frozen=True)
class PredictorSpec:
    kind: str = "identity"
    external: str | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "external"):
            raise ConfigError(f"unknown predictor kind {self.kind!r}")
        if (self.kind == "external") != (self.external is not None):
            raise ConfigError("external path must be set iff kind == 'external'")

    @classmethod
    def parse(cls, text):
        """``identity`` or ``external:<path>``."""
        if text == "identity":
            return cls()
        if text.startswith("external:") and len(text) > len("external:"):
            return cls("external", text[len("external:"):])
        raise ConfigError(f"predictor must be 'identity' or 'external:<path>', got {text!r}")


@dataclass(frozen=True)
class CompletionConfig:
    k: int = 8
    n_in: int = 2048
    m_out: int = 16384
    strategy: str = "ball_query"
    radius: float = DEFAULT_RADIUS
    threshold: float = DEFAULT_THRESHOLD
    k_nn: int = DEFAULT_KNN
    neighborhood: str = "global"
    solver: SolverOptions = field(default_factory=SolverOptions)
    predictor: PredictorSpec = field(default_factory=PredictorSpec)
    normalize: bool = False
    workers: int | None = None
    timeout: float = 300.0

    def __post_init__(self):
        if self.k < 4:
            raise ConfigError(f"k must be >= 4 for a unique decode, got {self.k}")
        if self.n_in < self.k:
            raise ConfigError(f"n_in ({self.n_in}) must be >= k ({self.k})")
        if self.m_out < 1:
            raise ConfigError("m_out must be >= 1")
        try:
            object.__setattr__(self, "strategy", normalize_strategy(self.strategy))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.radius < 0:
            raise ConfigError("radius must be nonnegative")
        if self.neighborhood not in ("global", "cluster"):
            raise ConfigError(f"neighborhood must be 'global' or 'cluster', got {self.neighborhood!r}")
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")

    def echo(self):
        d = asdict(self)
        d["predictor"] = "identity" if self.predictor.kind == "identity" else f"external:{self.predictor.external}"
        return d


class PipelineError(AnchorPCError):
    """A stage failed; ``cause`` holds the original exception."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {cause}")


def resample(cloud: PointCloud, n_target: int, seed=None) -> PointCloud:
    """Bring ``cloud`` to exactly ``n_target`` points.

    Larger clouds are thinned by deterministic FPS; smaller ones are padded by
    repeating points round-robin from index 0. ``seed`` is accepted for
    interface stability; padding adds no jitter so it has no effect.
    """
    n = len(cloud)
    if n == 0:
        raise ValueError("cannot resample an empty cloud")
    if n == n_target:
        return cloud
    if n > n_target:
        return cloud.subset(deterministic_fps(cloud, n_target))
    extra = np.arange(n_target - n) % n
    return cloud.subset(np.concatenate([np.arange(n), extra]))


def _command(path):
    if path.endswith(".py") and not os.access(path, os.X_OK):
        return [sys.executable, path]
    return [path]


def predict_distances(D_partial: DistanceMatrix, m_out: int, spec: PredictorSpec,
                      seed=None, timeout=300.0, diagnostics=None) -> DistanceMatrix:
    """Map partial distances to ``m_out`` complete-shape distance rows.

    ``identity`` cycles the input rows. ``external`` runs
    ``<exe> <in.escd> <out.escd> <m_out>`` and validates what comes back.
    Anything the child prints on stderr is appended to ``diagnostics`` when a
    list is supplied.
    """
    if spec.kind == "identity":
        rows = D_partial.values[np.arange(m_out) % D_partial.rows]
        return DistanceMatrix(rows, D_partial.anchors)

    with tempfile.TemporaryDirectory(prefix="anchorpc-") as tmp:
        src = os.path.join(tmp, "in.escd")
        dst = os.path.join(tmp, "out.escd")
        write_escd(D_partial, src)
        env = dict(os.environ)
        if seed is not None:
            env["ANCHORPC_SEED"] = str(seed)
        try:
            proc = subprocess.run(_command(spec.external) + [src, dst, str(m_out)],
                                  capture_output=True, timeout=timeout, env=env)
        except FileNotFoundError:
            raise ExternalFailed(127, f"predictor not found: {spec.external}") from None
        except PermissionError:
            raise ExternalFailed(126, f"predictor not executable: {spec.external}") from None
        except subprocess.TimeoutExpired as exc:
            err = (exc.stderr or b"").decode("utf-8", "replace")
            raise ExternalFailed(-1, f"timed out after {timeout}s {err}") from None
        stderr = proc.stderr.decode("utf-8", "replace")
        if diagnostics is not None and stderr:
            diagnostics.append(stderr)
        if proc.returncode != 0:
            raise ExternalFailed(proc.returncode, stderr)
        try:
            out = read_escd(dst)
        except FileNotFoundError:
            raise BadExternalOutput("predictor produced no output file") from None
        except FormatError as exc:
            raise BadExternalOutput(str(exc)) from None

    if out.cols != D_partial.cols:
        raise BadExternalOutput(f"expected {D_partial.cols} columns, got {out.cols}")
    if out.rows != m_out:
        raise BadExternalOutput(f"expected {m_out} rows, got {out.rows}")
    if not np.array_equal(out.anchors.anchors, D_partial.anchors.anchors):
        raise BadExternalOutput("anchors in predictor output differ from input")
    return DistanceMatrix(out.values, D_partial.anchors)


@dataclass
class CompletionReport:
    anchors: AnchorSet
    residuals: np.ndarray
    failed_rows: dict
    timings: dict
    normalization: dict | None
    predictor_stderr: list
    config: dict
    seed: object
    # intermediates kept in memory only
    resampled: PointCloud | None = None
    encoded: DistanceMatrix | None = None
    predicted: DistanceMatrix | None = None

    def residual_stats(self):
        r = self.residuals[np.isfinite(self.residuals)]
        if r.size == 0:
            return {"max": None, "mean": None, "median": None}
        return {"max": float(r.max()), "mean": float(r.mean()), "median": float(np.median(r))}

    def records(self):
        yield {"type": "config", "seed": self.seed, **self.config}
        yield {"type": "anchors", "strategy": self.anchors.strategy,
               "k": self.anchors.k, "margin": self.anchors.margin,
               "source_indices": None if self.anchors.source_indices is None
               else [int(i) for i in self.anchors.source_indices],
               "coordinates": self.anchors.anchors.tolist()}
        yield {"type": "residuals", **self.residual_stats(),
               "failed_rows": sorted(self.failed_rows)}
        if self.normalization is not None:
            yield {"type": "normalization", **self.normalization}
        yield {"type": "timings", **self.timings}
        if self.predictor_stderr:
            yield {"type": "predictor_stderr", "text": "".join(self.predictor_stderr)}

    def to_jsonl(self):
        return "".join(json.dumps(r, default=_json_default) + "\n" for r in self.records())


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, float) and not np.isfinite(o):
        return str(o)
    raise TypeError(type(o).__name__)


def complete(partial: PointCloud, config: CompletionConfig | None = None, seed=0):
    """Run the full pipeline; returns ``(completed cloud, CompletionReport)``."""
    config = config or CompletionConfig()
    timings = {}

    def stage(name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except AnchorPCError as exc:
            raise PipelineError(name, exc) from exc
        except ValueError as exc:
            raise PipelineError(name, exc) from exc
        finally:
            timings[name] = time.perf_counter() - t0

    cloud = stage("resample", resample, partial, config.n_in, seed)
    if len(cloud) < config.k:
        raise PipelineError("resample", ValueError(f"{len(cloud)} points < k={config.k}"))

    normalization = None
    work = cloud
    if config.normalize:
        center = cloud.centroid
        far = float(np.sqrt(((cloud.points - center) ** 2).sum(axis=1)).max())
        scale = 0.5 / far if far > 0 else 1.0
        work = PointCloud((cloud.points - center) * scale, cloud.normals)
        normalization = {"center": center.tolist(), "scale": scale}

    anchors = stage("select_anchors", select_anchors, work, config.k, config.strategy,
                    radius=config.radius, threshold=config.threshold, k_nn=config.k_nn,
                    neighborhood=config.neighborhood)
    D_partial = stage("encode", encode, work, anchors)
    stderr = []
    D_pred = stage("predict", predict_distances, D_partial, config.m_out, config.predictor,
                   seed=seed, timeout=config.timeout, diagnostics=stderr)
    result = stage("decode", decode, D_pred, config.solver, workers=config.workers)

    out = result.cloud
    report_anchors = anchors
    if normalization is not None:
        scale, center = normalization["scale"], np.asarray(normalization["center"])
        out = PointCloud(out.points / scale + center)
        report_anchors = AnchorSet(anchors.anchors / scale + center, anchors.source_indices,
                                   anchors.strategy, anchors.params, anchors.seeds, anchors.margin)
    report = CompletionReport(report_anchors, result.residuals, result.failed, timings,
                              normalization, stderr, config.echo(), seed,
                              resampled=cloud, encoded=D_partial, predicted=D_pred)
    return out, report
