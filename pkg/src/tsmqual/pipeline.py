"""Per-pair feature extraction, labelled feature tables, scaling and
persistence."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import tsm_features as tf
from .audio_io import AudioSignal, load_pair
from .errors import DataError, FeatureError, SchemaError, TsmQualError
from .hpss import HpssConfig
from .peaq import peaq_basic
from .spectral import AlignmentMode, DEFAULT_ALIGNMENT, align_signals, estimate_beta, stft

SCHEMA_VERSION = "tsmqual-features/1"

# Frozen order; bump SCHEMA_VERSION when it changes.
PEAQ_COLUMNS = {
    "BandwidthRefB": "bandwidth_ref",
    "BandwidthTestB": "bandwidth_test",
    "TotalNMRB": "total_nmr",
    "WinModDiff1B": "win_mod_diff1",
    "ADBB": "adb",
    "EHSB": "ehs",
    "AvgModDiff1B": "avg_mod_diff1",
    "AvgModDiff2B": "avg_mod_diff2",
    "RmsNoiseLoudB": "rms_noise_loud",
    "MFPDB": "mfpd",
    "RelDistFramesB": "rel_dist_frames",
}
TSM_COLUMNS = {
    "BandwidthTestNew": "bandwidth_test_new",
    "SER": "ser",
    "DM": "dm",
    "MPhNW": "mphnw",
    "SPhNW": "sphnw",
    "MPhMW": "mphmw",
    "SPhMW": "sphmw",
    "SSMAD": "ssmad",
    "SSMD": "ssmd",
    "PeakDelta": "peak_delta",
    "TrRat": "tr_rat",
    "HPSTrRat": "hps_tr_rat",
}
FEATURE_NAMES = tuple(PEAQ_COLUMNS) + tuple(TSM_COLUMNS)
META_COLUMNS = ("subset", "ref", "test", "method", "beta", "class", "alignment", "augmented")
LABEL_COLUMNS = ("smos", "raw_smos", "median_os", "raw_median_os")
FILE_CLASSES = ("music", "solo", "voice")
MANIFEST_COLUMNS = ("subset", "ref_path", "test_path", "method", "beta", "smos",
                    "raw_smos", "median_os", "raw_median_os", "class")


@dataclass(frozen=True)
class FeatureConfig:
    alignment: str = DEFAULT_ALIGNMENT.value
    frame_size: int = 2048
    hop: int = 512
    hpss_frame_size: int = 1024
    hpss_hop: int = 256
    hpss_kernel: int = 17

    def __post_init__(self):
        object.__setattr__(self, "alignment", AlignmentMode.parse(self.alignment).value)

    @property
    def mode(self) -> AlignmentMode:
        return AlignmentMode(self.alignment)

    @property
    def hpss(self) -> HpssConfig:
        return HpssConfig(self.hpss_frame_size, self.hpss_hop, self.hpss_kernel,
                          self.hpss_kernel)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "FeatureConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class FeatureVector:
    values: dict
    ref: str = ""
    test: str = ""
    method: str = ""
    beta: float = 1.0
    file_class: str = ""
    alignment: str = DEFAULT_ALIGNMENT.value
    diagnostics: list = field(default_factory=list)

    def as_array(self) -> np.ndarray:
        return np.array([self.values[n] for n in FEATURE_NAMES], dtype=np.float64)


def _compute(name, fn, *args):
    try:
        return fn(*args)
    except FeatureError:
        raise
    except TsmQualError as exc:
        raise FeatureError(name, str(exc)) from exc


def features_from_signals(ref: AudioSignal, test: AudioSignal, config: FeatureConfig = FeatureConfig(),
                          beta: float | None = None) -> FeatureVector:
    """All 23 features for a prepared, truncated pair."""
    if ref.sample_rate != test.sample_rate:
        raise DataError("sample rate mismatch between reference and test")
    beta = estimate_beta(ref, test, beta)
    n, hop = config.frame_size, config.hop
    diagnostics = []

    movs = _compute("peaq", peaq_basic, ref, test, config.mode, beta)
    ref_mag, test_mag = _compute("alignment", align_signals, ref, test, config.mode, beta, n, hop)
    ref_spec = _compute("stft", stft, ref, n, hop)
    test_spec = _compute("stft", stft, test, n, hop)
    mphnw, mphmw, sphnw, sphmw = _compute("phasiness", tf.phasiness, ref_spec, test_spec, beta)
    ssmad, ssmd = _compute("spectral_similarity", tf.spectral_similarity, ref, test, beta, n, hop)
    ref_env = tf.pick_peaks(_compute("onset", tf.onset_envelope_from_spec, ref_spec))
    test_env = tf.pick_peaks(_compute("onset", tf.onset_envelope_from_spec, test_spec))

    tsm = tf.TsmFeatureSet(
        ser=tf.ser(ref_mag, test_mag),
        dm=_compute("dm", tf.dm, ref_mag, test_mag),
        mphnw=mphnw, mphmw=mphmw, sphnw=sphnw, sphmw=sphmw,
        ssmad=ssmad, ssmd=ssmd,
        peak_delta=tf.peak_delta(ref_env, test_env, ref.sample_rate, len(ref)),
        tr_rat=tf.transient_ratio(ref_env, test_env, diagnostics),
        hps_tr_rat=_compute("hps_tr_rat", tf.hps_transient_ratio, ref, test, config.hpss),
        bandwidth_test_new=tf.bandwidth_test_new(test_spec),
        diagnostics=diagnostics,
    )
    values = {col: getattr(movs, attr) for col, attr in PEAQ_COLUMNS.items()}
    values.update({col: getattr(tsm, attr) for col, attr in TSM_COLUMNS.items()})
    for name, value in values.items():
        if not np.isfinite(value):
            raise FeatureError(name, f"non-finite value {value}")
    return FeatureVector(values, beta=beta, alignment=config.alignment, diagnostics=diagnostics)


def extract_features(ref_path, test_path, config: FeatureConfig = FeatureConfig(),
                     beta: float | None = None, method: str = "", file_class: str = "") -> FeatureVector:
    """Load, prepare and truncate a file pair, then compute every feature."""
    ref, test = load_pair(ref_path, test_path)
    vec = features_from_signals(ref, test, config, beta)
    vec.ref, vec.test = str(ref_path), str(test_path)
    vec.method, vec.file_class = method, file_class
    return vec


# -- scaling -------------------------------------------------------------------

@dataclass
class Scaler:
    """Per-feature min/max affine map onto [0, 1]; not clamped."""

    names: tuple
    a_min: np.ndarray
    a_max: np.ndarray

    @classmethod
    def fit(cls, frame: pd.DataFrame, names=FEATURE_NAMES) -> "Scaler":
        data = frame[list(names)].to_numpy(dtype=np.float64)
        if data.shape[0] < 2:
            raise DataError("need at least two rows to fit a scaler")
        lo, hi = data.min(axis=0), data.max(axis=0)
        for name, a, b in zip(names, lo, hi):
            if not b > a:
                raise DataError(f"feature {name} is constant ({a}); cannot scale")
        return cls(tuple(names), lo, hi)

    def transform(self, data: np.ndarray) -> np.ndarray:
        return (np.asarray(data, dtype=np.float64) - self.a_min) / (self.a_max - self.a_min)

    def inverse(self, data: np.ndarray) -> np.ndarray:
        return np.asarray(data, dtype=np.float64) * (self.a_max - self.a_min) + self.a_min

    def to_dict(self) -> dict:
        return {"names": list(self.names), "a_min": self.a_min.tolist(),
                "a_max": self.a_max.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Scaler":
        return cls(tuple(d["names"]), np.array(d["a_min"], dtype=np.float64),
                   np.array(d["a_max"], dtype=np.float64))


def scale_targets(scores):
    """Opinion scores on [1, 5] to [0, 1]."""
    return (np.asarray(scores, dtype=np.float64) - 1.0) / 4.0


def unscale_targets(y):
    return 4.0 * np.asarray(y, dtype=np.float64) + 1.0


# -- tables --------------------------------------------------------------------

@dataclass
class FeatureTable:
    frame: pd.DataFrame
    scaler: Scaler | None = None
    config: FeatureConfig | None = None

    def __len__(self):
        return len(self.frame)

    @property
    def features(self) -> np.ndarray:
        return self.frame[list(FEATURE_NAMES)].to_numpy(dtype=np.float64)

    def labels(self, target: str = "smos") -> np.ndarray:
        if target not in self.frame.columns:
            raise DataError(f"table has no {target!r} labels")
        return self.frame[target].to_numpy(dtype=np.float64)


def empty_frame() -> pd.DataFrame:
    return pd.DataFrame(columns=list(META_COLUMNS + FEATURE_NAMES + LABEL_COLUMNS))


def row_from_vector(vec: FeatureVector, subset: str = "", labels: dict | None = None,
                    augmented: bool = False) -> dict:
    row = {"subset": subset, "ref": vec.ref, "test": vec.test, "method": vec.method,
           "beta": vec.beta, "class": vec.file_class, "alignment": vec.alignment,
           "augmented": bool(augmented)}
    row.update(vec.values)
    labels = labels or {}
    for name in LABEL_COLUMNS:
        row[name] = labels.get(name, np.nan)
    return row


def table_from_rows(rows, config: FeatureConfig | None = None) -> FeatureTable:
    frame = pd.DataFrame(list(rows), columns=list(META_COLUMNS + FEATURE_NAMES + LABEL_COLUMNS))
    frame["augmented"] = frame["augmented"].astype(bool)
    return FeatureTable(frame.reset_index(drop=True), config=config)


def normalize(table: FeatureTable, scaler: Scaler | None = None) -> FeatureTable:
    """Scale every feature to [0, 1] with a scaler fitted on ``table`` unless
    one is supplied."""
    scaler = scaler or Scaler.fit(table.frame)
    frame = table.frame.copy()
    frame[list(FEATURE_NAMES)] = scaler.transform(table.features)
    return FeatureTable(frame, scaler, table.config)


def denormalize(table: FeatureTable) -> FeatureTable:
    if table.scaler is None:
        raise DataError("table is not normalised")
    frame = table.frame.copy()
    frame[list(FEATURE_NAMES)] = table.scaler.inverse(table.features)
    return FeatureTable(frame, None, table.config)


def include_references(table: FeatureTable, ref_paths=None,
                       config: FeatureConfig | None = None) -> FeatureTable:
    """Append one identity row (reference as its own test, all labels 5) per
    reference not already present as an augmentation row."""
    config = config or table.config or FeatureConfig()
    frame = table.frame
    if ref_paths is None:
        source = (~frame["augmented"].astype(bool)) & (frame["subset"] == "train")
        ref_paths = frame.loc[source, "ref"].unique()
    have = set(frame.loc[frame["augmented"].astype(bool), "ref"])
    rows = []
    for path in ref_paths:
        if path in have:
            continue
        match = frame.loc[frame["ref"] == path, "class"]
        rows.append(reference_row(path, match.iloc[0] if len(match) else "", config))
        have.add(path)
    if not rows:
        return table
    added = pd.DataFrame(rows, columns=frame.columns)
    merged = pd.concat([frame, added], ignore_index=True) if len(frame) else added
    return FeatureTable(merged, table.scaler, config)


# -- persistence ---------------------------------------------------------------

def _header_line(config: FeatureConfig | None) -> str:
    parts = [f"schema={SCHEMA_VERSION}"]
    if config is not None:
        parts += [f"{k}={v}" for k, v in config.to_dict().items()]
    return "# " + " ".join(parts) + "\n"


def save_table(table: FeatureTable, path) -> None:
    """Comma-separated file: schema comment line, header, one row per pair.
    Floats are written with shortest round-trip repr."""
    buf = io.StringIO()
    buf.write(_header_line(table.config))
    table.frame.to_csv(buf, index=False, lineterminator="\n", float_format=None)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _parse_header(line: str):
    if not line.startswith("#"):
        raise SchemaError("feature table is missing its schema header line")
    fields_ = dict(p.split("=", 1) for p in line[1:].split() if "=" in p)
    schema = fields_.pop("schema", None)
    if schema != SCHEMA_VERSION:
        raise SchemaError(f"feature table schema {schema!r} does not match {SCHEMA_VERSION!r}")
    config = None
    if fields_:
        ints = {k: int(v) for k, v in fields_.items() if k != "alignment"}
        config = FeatureConfig.from_dict({**ints, "alignment": fields_.get("alignment",
                                                                           DEFAULT_ALIGNMENT.value)})
    return config


def load_table(path) -> FeatureTable:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read feature table {path}: {exc}") from exc
    first, _, rest = text.partition("\n")
    config = _parse_header(first)
    frame = pd.read_csv(io.StringIO(rest), float_precision="round_trip",
                        dtype={"subset": str, "ref": str, "test": str, "method": str,
                               "class": str, "alignment": str},
                        keep_default_na=False, na_values={c: [""] for c in LABEL_COLUMNS})
    missing = [c for c in FEATURE_NAMES if c not in frame.columns]
    if missing:
        raise SchemaError(f"feature table lacks columns {missing}")
    frame["augmented"] = frame["augmented"].astype(str).str.lower().isin(["true", "1"])
    for col in ("beta",) + FEATURE_NAMES + LABEL_COLUMNS:
        if col in frame.columns:
            frame[col] = pd.to_numeric(frame[col], errors="raise").astype(np.float64)
    return FeatureTable(frame, None, config)


# -- manifests -----------------------------------------------------------------

@dataclass
class ManifestRow:
    subset: str
    ref_path: str
    test_path: str
    method: str
    beta: float | None
    labels: dict
    file_class: str


def _float_or_none(value):
    value = (value or "").strip()
    if not value:
        return None
    try:
        return float(value)
    except ValueError:
        raise DataError(f"not a number: {value!r}") from None


def load_manifest(path, check_files: bool = False) -> list:
    """Rows of (subset, ref, test, method, beta, labels, class); relative paths
    resolve against the manifest's directory."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    needed = {"ref_path", "test_path"}
    if reader.fieldnames is None or not needed <= set(reader.fieldnames):
        raise DataError(f"manifest {path} needs at least columns {sorted(needed)}")
    base = path.parent
    rows = []
    for i, rec in enumerate(reader, start=2):
        try:
            beta = _float_or_none(rec.get("beta"))
            labels = {n: _float_or_none(rec.get(n)) for n in LABEL_COLUMNS}
        except DataError as exc:
            raise DataError(f"{path}:{i}: {exc}") from None
        if beta is not None and not beta > 0:
            raise DataError(f"{path}:{i}: beta must be positive")
        ref = _resolve(base, rec["ref_path"])
        test = _resolve(base, rec["test_path"])
        if check_files:
            for p in (ref, test):
                if not Path(p).is_file():
                    raise DataError(f"{path}:{i}: missing file {p}")
        rows.append(ManifestRow((rec.get("subset") or "train").strip(), ref, test,
                                (rec.get("method") or "").strip(), beta,
                                {k: v for k, v in labels.items() if v is not None},
                                (rec.get("class") or "").strip().lower()))
    return rows


def _resolve(base: Path, p: str) -> str:
    p = (p or "").strip()
    if not p:
        raise DataError("empty path in manifest")
    q = Path(p)
    return str(q if q.is_absolute() else base / q)


def row_features(row: ManifestRow, config: FeatureConfig, beta_override: float | None = None) -> dict:
    beta = beta_override if beta_override is not None else row.beta
    vec = extract_features(row.ref_path, row.test_path, config, beta, row.method, row.file_class)
    return row_from_vector(vec, row.subset, row.labels)


def reference_row(ref_path: str, file_class: str, config: FeatureConfig) -> dict:
    vec = extract_features(ref_path, ref_path, config, 1.0, "reference", file_class)
    return row_from_vector(vec, "train", {n: 5.0 for n in LABEL_COLUMNS}, augmented=True)
