import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tsmqual.audio_io import AudioSignal, write_audio
from tsmqual.errors import DataError, FeatureError, SchemaError
from tsmqual.pipeline import (FEATURE_NAMES, FeatureConfig, Scaler, denormalize,
                              extract_features, features_from_signals, include_references,
                              load_manifest, load_table, normalize, row_features,
                              row_from_vector, save_table, scale_targets, table_from_rows,
                              unscale_targets)
from tsmqual.spectral import AlignmentMode

from conftest import FS, music_like, ola_stretch

IDENTITY = {"SER": 80.0, "DM": 0.0, "MPhNW": 0.0, "MPhMW": 0.0, "SPhNW": 0.0, "SPhMW": 0.0,
            "SSMAD": 0.0, "SSMD": 0.0, "PeakDelta": 0.0, "TrRat": 1.0, "HPSTrRat": 1.0}


@pytest.fixture(scope="module")
def audio_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("audio")
    for i in range(2):
        x = 0.8 * music_like(2.0, seed=i)
        write_audio(d / f"ref{i}.wav", AudioSignal(x / np.max(np.abs(x)), FS))
        y = ola_stretch(x, 0.8)
        write_audio(d / f"test{i}.wav", AudioSignal(0.9 * y / np.max(np.abs(y)), FS))
    return d


@pytest.fixture(scope="module")
def manifest(audio_dir):
    path = audio_dir / "manifest.csv"
    path.write_text(
        "subset,ref_path,test_path,method,beta,smos,raw_smos,median_os,raw_median_os,class\n"
        "train,ref0.wav,test0.wav,OLA,0.8,3.1,3.0,3,3,music\n"
        "train,ref1.wav,test1.wav,OLA,0.8,2.2,2.0,2,2,voice\n"
        "test,ref0.wav,ref0.wav,Copy,,4.9,,5,,music\n")
    return path


class TestExtract:
    def test_identity_pair(self, audio_dir):
        vec = extract_features(audio_dir / "ref0.wav", audio_dir / "ref0.wav")
        for name, value in IDENTITY.items():
            assert vec.values[name] == value, name
        assert vec.values["TotalNMRB"] == -100.0
        assert list(vec.values) == list(FEATURE_NAMES)
        assert vec.beta == 1.0

    def test_identity_all_modes(self):
        x = AudioSignal(music_like(1.5, seed=3), FS)
        first = None
        for mode in AlignmentMode:
            vec = features_from_signals(x, x, FeatureConfig(alignment=mode.value), 1.0)
            vals = {k: vec.values[k] for k in IDENTITY}
            assert vals == IDENTITY
            first = first or vec.values
            assert vec.values == first

    def test_known_beta_recorded(self, manifest):
        row = load_manifest(manifest)[0]
        row.beta = 0.5383
        assert row_features(row, FeatureConfig())["beta"] == 0.5383

    def test_beta_from_lengths(self, audio_dir):
        vec = extract_features(audio_dir / "ref0.wav", audio_dir / "test0.wav")
        assert vec.beta == pytest.approx(0.8, abs=0.01)
        assert all(np.isfinite(vec.as_array()))

    def test_deterministic(self, audio_dir):
        a = extract_features(audio_dir / "ref1.wav", audio_dir / "test1.wav").as_array()
        b = extract_features(audio_dir / "ref1.wav", audio_dir / "test1.wav").as_array()
        assert a.tobytes() == b.tobytes()

    def test_failure_names_feature(self):
        x = AudioSignal(np.random.default_rng(0).standard_normal(22050), 22050)
        with pytest.raises(FeatureError) as info:
            features_from_signals(x, x)
        assert info.value.feature == "bandwidth"

    def test_config_roundtrip(self):
        cfg = FeatureConfig(alignment="anchor_ref", frame_size=1024, hop=256)
        assert FeatureConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.mode is AlignmentMode.ANCHOR_REF


def table_of(values_by_feature, n):
    rows = []
    for i in range(n):
        r = {"subset": "train", "ref": f"r{i}", "test": f"t{i}", "method": "m", "beta": 0.5,
             "class": "music", "alignment": "interp_to_test", "augmented": False, "smos": 3.0}
        for j, f in enumerate(FEATURE_NAMES):
            r[f] = values_by_feature.get(f, [float(i * (j + 1))] * n)[i]
        rows.append(r)
    return table_from_rows(rows)


class TestScaling:
    def test_affine(self):
        t = normalize(table_of({"SER": [2.0, 4.0, 6.0]}, 3))
        assert t.frame["SER"].tolist() == [0.0, 0.5, 1.0]

    def test_out_of_range_not_clamped(self):
        sc = Scaler(("a",), np.array([0.0]), np.array([2.0]))
        assert sc.transform(np.array([[3.0]]))[0, 0] == 1.5
        assert sc.transform(np.array([[0.0]]))[0, 0] == 0.0

    def test_constant_feature(self):
        with pytest.raises(DataError, match="SER"):
            normalize(table_of({"SER": [80.0, 80.0]}, 2))

    def test_targets(self):
        assert scale_targets([1, 5, 3]).tolist() == [0.0, 1.0, 0.5]
        assert unscale_targets([0.5]).tolist() == [3.0]

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (6, len(FEATURE_NAMES)), elements=st.floats(-1e3, 1e3)))
    def test_roundtrip(self, data):
        if np.any(np.ptp(data, axis=0) < 1e-3):
            return
        t = table_of({f: data[:, j].tolist() for j, f in enumerate(FEATURE_NAMES)}, 6)
        n = normalize(t)
        assert np.all((n.features >= 0) & (n.features <= 1))
        np.testing.assert_allclose(denormalize(n).features, data, atol=1e-12 * 1e3)


class TestReferences:
    def test_rows_appended(self, manifest):
        rows = [row_features(r, FeatureConfig()) for r in load_manifest(manifest)[:2]]
        table = table_from_rows(rows, FeatureConfig())
        out = include_references(table)
        assert len(out) == len(table) + 2
        added = out.frame[out.frame["augmented"]]
        assert (added["SER"] == 80.0).all() and (added["smos"] == 5.0).all()
        assert len(include_references(out)) == len(out)
        one = include_references(table, [rows[0]["ref"]])
        assert len(one) == len(table) + 1


class TestPersistence:
    def test_roundtrip(self, tmp_path, rng):
        data = rng.standard_normal((4, len(FEATURE_NAMES))) * 10.0 ** rng.integers(-8, 8, (4, 1))
        t = table_of({f: data[:, j].tolist() for j, f in enumerate(FEATURE_NAMES)}, 4)
        t.config = FeatureConfig(alignment="anchor_test", hop=256)
        t.frame.loc[1, "smos"] = np.nan
        save_table(t, tmp_path / "t.csv")
        back = load_table(tmp_path / "t.csv")
        assert back.features.tobytes() == t.features.tobytes()
        assert back.config == t.config
        assert np.isnan(back.frame.loc[1, "smos"])
        assert back.frame["augmented"].dtype == bool

    def test_schema_mismatch(self, tmp_path):
        t = table_of({}, 2)
        save_table(t, tmp_path / "t.csv")
        text = (tmp_path / "t.csv").read_text().replace("tsmqual-features/1", "tsmqual-features/0")
        (tmp_path / "bad.csv").write_text(text)
        with pytest.raises(SchemaError):
            load_table(tmp_path / "bad.csv")

    def test_missing_header(self, tmp_path):
        (tmp_path / "h.csv").write_text("a,b\n1,2\n")
        with pytest.raises(SchemaError):
            load_table(tmp_path / "h.csv")


class TestManifest:
    def test_fields(self, manifest, audio_dir):
        rows = load_manifest(manifest, check_files=True)
        assert len(rows) == 3
        assert rows[0].ref_path == str(audio_dir / "ref0.wav")
        assert rows[0].labels["smos"] == 3.1 and rows[1].file_class == "voice"
        assert rows[2].beta is None and "raw_smos" not in rows[2].labels

    def test_bad_beta(self, tmp_path):
        (tmp_path / "m.csv").write_text("ref_path,test_path,beta\na.wav,b.wav,-1\n")
        with pytest.raises(DataError, match="beta"):
            load_manifest(tmp_path / "m.csv")

    def test_missing_columns(self, tmp_path):
        (tmp_path / "m.csv").write_text("ref,test\na,b\n")
        with pytest.raises(DataError):
            load_manifest(tmp_path / "m.csv")

    def test_missing_file(self, tmp_path):
        (tmp_path / "m.csv").write_text("ref_path,test_path\na.wav,b.wav\n")
        with pytest.raises(DataError, match="missing file"):
            load_manifest(tmp_path / "m.csv", check_files=True)


def test_row_from_vector_labels(audio_dir):
    vec = extract_features(audio_dir / "ref0.wav", audio_dir / "ref0.wav", method="x",
                           file_class="solo")
    row = row_from_vector(vec, "eval", {"smos": 4.0})
    assert row["class"] == "solo" and row["smos"] == 4.0 and np.isnan(row["median_os"])
    assert isinstance(table_from_rows([row]).frame, pd.DataFrame)
