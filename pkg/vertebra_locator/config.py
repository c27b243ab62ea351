"""Pipeline configuration: flat KEY=value files with `#` comments.

Precedence, lowest first: built-in defaults, the config file, `VERTEBRA_*`
environment variables, explicit overrides from the command line.
"""
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from dotenv import dotenv_values

from .errors import ConfigError
from .landmarks import parse_labels
from .volume import gaussian_peak

logger = logging.getLogger(__name__)

ENV_PREFIX = "VERTEBRA_"
ORIENTATIONS = ("descending", "ascending")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
PRESENCE_FRACTION = 0.3


def _opt(key, kind, doc):
    return {"key": key, "kind": kind, "doc": doc}


@dataclass(frozen=True)
class PipelineConfig:
    # paths
    output_dir: str = field(default="output", metadata=_opt("OUTPUT_DIR", "str", "every artifact is written below this folder"))
    train_manifest: str = field(default="", metadata=_opt("TRAIN_MANIFEST", "str", "training set manifest; blank = OUTPUT_DIR/dataset/train/manifest.csv"))
    test_manifest: str = field(default="", metadata=_opt("TEST_MANIFEST", "str", "evaluation set manifest; blank = OUTPUT_DIR/dataset/test/manifest.csv"))
    model_path: str = field(default="", metadata=_opt("MODEL_PATH", "str", "network header; blank = OUTPUT_DIR/model/network.hdr"))
    kernel_bundle: str = field(default="", metadata=_opt("KERNEL_BUNDLE", "str", "kernel manifest; blank = OUTPUT_DIR/kernels/kernels.hdr"))
    dictionary_dir: str = field(default="", metadata=_opt("DICTIONARY_DIR", "str", "shape dictionary folder; blank = OUTPUT_DIR/dictionary"))
    # general
    labels: str = field(default="desk", metadata=_opt("LABELS", "str", "'desk', 'all' or a comma separated label list in chain order"))
    orientation: str = field(default="descending", metadata=_opt("ORIENTATION", "str", "whether z descends or ascends from head to foot"))
    seed: int = field(default=0, metadata=_opt("SEED", "int", "seed of every random draw"))
    log_level: str = field(default="INFO", metadata=_opt("LOG_LEVEL", "str", "DEBUG, INFO, WARNING or ERROR"))
    # synthetic data
    train_cases: int = field(default=20, metadata=_opt("TRAIN_CASES", "int", "number of training spines"))
    test_cases: int = field(default=10, metadata=_opt("TEST_CASES", "int", "number of evaluation spines"))
    dims: tuple = field(default=(16, 16, 48), metadata=_opt("DIMS", "ints", "volume size in voxels (x,y,z)"))
    spacing: tuple = field(default=(4.0, 4.0, 4.0), metadata=_opt("SPACING", "floats", "voxel size in mm"))
    nominal_spacing_mm: float = field(default=15.0, metadata=_opt("NOMINAL_SPACING_MM", "float", "mean distance between adjacent centroids"))
    jitter_mm: float = field(default=1.0, metadata=_opt("JITTER_MM", "float", "x/y jitter of every centroid"))
    spacing_jitter: float = field(default=0.03, metadata=_opt("SPACING_JITTER", "float", "relative jitter of each inter-vertebra distance"))
    curvature_jitter_mm: float = field(default=1.0, metadata=_opt("CURVATURE_JITTER_MM", "float", "jitter of the curve coefficients"))
    shift_sigma_mm: float = field(default=4.0, metadata=_opt("SHIFT_SIGMA_MM", "float", "global translation of each spine"))
    blob_sigma_mm: float = field(default=4.0, metadata=_opt("BLOB_SIGMA_MM", "float", "width of rendered vertebra blobs"))
    noise_sigma: float = field(default=0.02, metadata=_opt("NOISE_SIGMA", "float", "additive Gaussian noise on rendered volumes"))
    # network
    sigma_mm: float = field(default=12.0, metadata=_opt("SIGMA_MM", "float", "width of the Gaussian training targets"))
    target_scale: float = field(default=None, metadata=_opt("TARGET_SCALE", "optfloat", "factor applied to training targets; blank = scale the target peak to 1"))
    widths: tuple = field(default=(8, 16), metadata=_opt("WIDTHS", "ints", "channel width of each encoder level"))
    levels: int = field(default=2, metadata=_opt("LEVELS", "int", "encoder levels; dims must be divisible by 2**LEVELS"))
    learning_rate: float = field(default=0.05, metadata=_opt("LEARNING_RATE", "float", "SGD step size"))
    epochs: int = field(default=80, metadata=_opt("EPOCHS", "int", "full passes over the training set"))
    batch_size: int = field(default=1, metadata=_opt("BATCH_SIZE", "optint", "samples per SGD step; blank = the whole training set"))
    train_sizes: tuple = field(default=(), metadata=_opt("TRAIN_SIZES", "intlist", "extra networks trained on the first n training cases and scored by eval; blank = none"))
    # message passing
    alpha: float = field(default=0.5, metadata=_opt("ALPHA", "float", "message discount, in (0, 1)"))
    iterations: int = field(default=3, metadata=_opt("ITERATIONS", "int", "message passing sweeps"))
    kernel_smoothing: float = field(default=1.0, metadata=_opt("KERNEL_SMOOTHING", "float", "Gaussian blur of learned kernels, in voxels"))
    kernel_half_width: int = field(default=None, metadata=_opt("KERNEL_HALF_WIDTH", "optint", "kernel half-width in voxels; blank = from the data"))
    # refinement
    lam: float = field(default=None, metadata=_opt("LAMBDA", "optfloat", "LASSO weight; blank = LAMBDA_RATIO scaled to the data"))
    lambda_ratio: float = field(default=0.01, metadata=_opt("LAMBDA_RATIO", "float", "lambda as a fraction of |D_z' v_z|_inf"))
    constant_column: bool = field(default=True, metadata=_opt("CONSTANT_COLUMN", "bool", "append an unpenalized unit column to the dictionary"))
    # evaluation
    presence_threshold: float = field(default=None, metadata=_opt("PRESENCE_THRESHOLD", "optfloat", "channel maximum needed for presence; blank = 0.3 x the target peak"))
    id_radius_mm: float = field(default=20.0, metadata=_opt("ID_RADIUS_MM", "float", "identification radius"))
    corrupt_weak_amplitude: float = field(default=1.2, metadata=_opt("CORRUPT_WEAK_AMPLITUDE", "float", "remote false positive, relative to the true peak"))
    corrupt_strong_amplitude: float = field(default=1.0, metadata=_opt("CORRUPT_STRONG_AMPLITUDE", "float", "shifted pair response, relative to the true peak"))

    def __post_init__(self):
        validate(self)

    @property
    def label_list(self):
        return parse_labels(self.labels)

    @property
    def descending(self):
        return self.orientation == "descending"

    @property
    def out(self):
        return Path(self.output_dir)

    def _path(self, value, default):
        return Path(value) if value else self.out / default

    def train_manifest_path(self):
        return self._path(self.train_manifest, "dataset/train/manifest.csv")

    def test_manifest_path(self):
        return self._path(self.test_manifest, "dataset/test/manifest.csv")

    def model_file(self):
        return self._path(self.model_path, "model/network.hdr")

    def kernel_file(self):
        return self._path(self.kernel_bundle, "kernels/kernels.hdr")

    def dictionary_path(self):
        return self._path(self.dictionary_dir, "dictionary")

    def scale(self):
        return self.target_scale if self.target_scale is not None else 1.0 / gaussian_peak(self.sigma_mm)

    def threshold(self):
        """PRESENCE_FRACTION of the scaled training target peak unless set explicitly."""
        if self.presence_threshold is not None:
            return self.presence_threshold
        return PRESENCE_FRACTION * gaussian_peak(self.sigma_mm) * self.scale()

    def spine_start(self):
        """Centred in x/y; the first centroid sits 12 mm inside the head-side slice (grid origin at 0)."""
        extent = [s * (n - 1) for s, n in zip(self.spacing, self.dims)]
        z = extent[2] - 12.0 if self.descending else 12.0
        return (extent[0] / 2.0, extent[1] / 2.0, z)


def _check(condition, key, message):
    if not condition:
        raise ConfigError(f"{key}: {message}")


def validate(config):
    c = config
    try:
        c.label_list
    except ConfigError as e:
        raise ConfigError(f"LABELS: {e}") from e
    _check(c.orientation in ORIENTATIONS, "ORIENTATION", f"must be one of {', '.join(ORIENTATIONS)}")
    _check(c.log_level in LOG_LEVELS, "LOG_LEVEL", f"must be one of {', '.join(LOG_LEVELS)}")
    _check(c.train_cases >= 1 and c.test_cases >= 1, "TRAIN_CASES/TEST_CASES", "need at least one case")
    _check(len(c.dims) == 3 and min(c.dims) >= 1, "DIMS", "need three positive sizes")
    _check(len(c.spacing) == 3 and min(c.spacing) > 0, "SPACING", "need three positive spacings")
    _check(c.levels >= 1 and len(c.widths) == c.levels and min(c.widths) >= 1, "WIDTHS", "need one positive width per level")
    _check(all(d % 2**c.levels == 0 for d in c.dims), "DIMS", f"must be divisible by {2**c.levels}")
    _check(c.nominal_spacing_mm > 0, "NOMINAL_SPACING_MM", "must be positive")
    for key, value in (
        ("JITTER_MM", c.jitter_mm),
        ("SPACING_JITTER", c.spacing_jitter),
        ("CURVATURE_JITTER_MM", c.curvature_jitter_mm),
        ("SHIFT_SIGMA_MM", c.shift_sigma_mm),
        ("NOISE_SIGMA", c.noise_sigma),
        ("KERNEL_SMOOTHING", c.kernel_smoothing),
        ("LAMBDA_RATIO", c.lambda_ratio),
        ("EPOCHS", c.epochs),
    ):
        _check(value >= 0, key, "must be nonnegative")
    _check(c.blob_sigma_mm > 0, "BLOB_SIGMA_MM", "must be positive")
    _check(c.sigma_mm > 0, "SIGMA_MM", "must be positive")
    _check(c.target_scale is None or c.target_scale > 0, "TARGET_SCALE", "must be positive")
    _check(c.learning_rate > 0, "LEARNING_RATE", "must be positive")
    _check(c.batch_size is None or c.batch_size >= 1, "BATCH_SIZE", "must be at least 1")
    _check(all(1 <= n < c.train_cases for n in c.train_sizes), "TRAIN_SIZES", "each size must lie in [1, TRAIN_CASES)")
    _check(0.0 < c.alpha < 1.0, "ALPHA", "must lie in (0, 1)")
    _check(c.iterations >= 1, "ITERATIONS", "must be at least 1")
    _check(c.kernel_half_width is None or c.kernel_half_width >= 1, "KERNEL_HALF_WIDTH", "must be at least 1")
    _check(c.lam is None or c.lam >= 0, "LAMBDA", "must be nonnegative")
    _check(c.presence_threshold is None or c.presence_threshold > 0, "PRESENCE_THRESHOLD", "must be positive")
    _check(c.id_radius_mm > 0, "ID_RADIUS_MM", "must be positive")
    _check(c.corrupt_weak_amplitude > 0 and c.corrupt_strong_amplitude > 0, "CORRUPT_*_AMPLITUDE", "must be positive")


def options():
    """(attribute, key, kind, doc) for every option, in file order."""
    return [(f.name, f.metadata["key"], f.metadata["kind"], f.metadata["doc"]) for f in fields(PipelineConfig)]


KEYS = {key: attr for attr, key, _, _ in options()}


def _parse_bool(text):
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


def parse_value(kind, text):
    text = "" if text is None else str(text).strip()
    if kind == "str":
        return text
    if kind in ("optint", "optfloat"):
        if not text:
            return None
        return int(text) if kind == "optint" else float(text)
    if kind == "intlist":
        return tuple(int(p) for p in text.replace(",", " ").split())
    if not text:
        raise ValueError("a value is required")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        return _parse_bool(text)
    parts = [p for p in text.replace(",", " ").split() if p]
    if kind == "ints":
        return tuple(int(p) for p in parts)
    if kind == "floats":
        return tuple(float(p) for p in parts)
    raise ValueError(f"unknown option kind {kind}")


def format_value(kind, value):
    if value is None:
        return ""
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("ints", "floats", "intlist"):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _apply(values, source):
    kinds = {key: kind for _, key, kind, _ in options()}
    parsed = {}
    for key, text in values.items():
        if key not in KEYS:
            raise ConfigError(f"{source}: unknown key {key}")
        try:
            parsed[KEYS[key]] = parse_value(kinds[key], text)
        except ValueError as e:
            raise ConfigError(f"{source}: {key}={text!r}: {e}") from e
    return parsed


def env_overrides(environ=None):
    """VERTEBRA_<KEY> variables; unknown keys are logged and skipped."""
    environ = os.environ if environ is None else environ
    found = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):]
        if key not in KEYS:
            logger.warning("ignoring %s: %s is not a configuration key", name, key)
            continue
        found[key] = value
    return found


def read_config_file(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        return dotenv_values(path, interpolate=False)
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e


def load_config(path=None, environ=None, overrides=None):
    """Effective configuration from defaults, file, environment and overrides."""
    merged = {}
    if path is not None:
        merged.update(_apply(read_config_file(path), str(path)))
    merged.update(_apply(env_overrides(environ), "environment"))
    merged.update(_apply(dict(overrides or {}), "command line"))
    config = replace(PipelineConfig(), **merged) if merged else PipelineConfig()
    logger.debug("effective config: %s", config)
    return config


def parse_set_options(items):
    """KEY=VALUE strings from repeated --set flags."""
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip().upper()] = value.strip()
    return out


def dump_config(config, path):
    lines = ["# effective configuration"]
    for attr, key, kind, doc in options():
        lines.append(f"# {doc}")
        lines.append(f"{key}={format_value(kind, getattr(config, attr))}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
