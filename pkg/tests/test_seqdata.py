import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kmm.errors import FormatError, ValidationError
from kmm.seqdata import (
    HEADER,
    EmbeddingSequence,
    MotionTrajectory,
    SequenceFileHeader,
    infer_format,
    load_sequence,
    load_trajectory,
    read_sequence,
    save_sequence,
    validate,
    write_matrix,
)

f32 = st.floats(allow_nan=False, allow_infinity=False, width=32)


@st.composite
def sequences(draw):
    n = draw(st.integers(1, 10))
    l = draw(st.integers(1, 5))
    tokens = draw(arrays(np.float64, (n, l), elements=f32))
    return EmbeddingSequence(tokens, draw(st.integers(0, n - 1)))


@settings(deadline=None)
@given(sequences())
def test_binary_round_trip_is_bit_exact(tmp_path_factory, seq):
    path = tmp_path_factory.mktemp("rt") / "s.kmm"
    save_sequence(seq, path)
    back = load_sequence(path)
    assert back.tokens.tobytes() == seq.tokens.tobytes()
    assert back.pad_len == seq.pad_len


@settings(deadline=None)
@given(sequences(), st.sampled_from(["csv", "json"]))
def test_text_formats_round_trip(tmp_path_factory, seq, fmt):
    path = tmp_path_factory.mktemp("rt") / f"s.{fmt}"
    save_sequence(seq, path)
    back = load_sequence(path)
    assert back.tokens.tobytes() == seq.tokens.tobytes()
    assert back.pad_len == seq.pad_len


def test_csv_and_binary_agree(tmp_path):
    x = np.random.default_rng(1).normal(size=(6, 3))
    seq = EmbeddingSequence(x)
    save_sequence(seq, tmp_path / "a.kmm")
    save_sequence(seq, tmp_path / "a.csv")
    a = load_sequence(tmp_path / "a.kmm").tokens
    b = load_sequence(tmp_path / "a.csv").tokens
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a, x, rtol=2**-23)


def test_magic_mismatch(tmp_path):
    path = tmp_path / "bad.kmm"
    save_sequence(EmbeddingSequence([[1.0, 2.0]]), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_sequence(path)


def test_unsupported_version(tmp_path):
    path = tmp_path / "v2.kmm"
    path.write_bytes(HEADER.pack(b"KMM1", 2, 1, 1, 0) + b"\0" * 4)
    with pytest.raises(FormatError, match="version"):
        load_sequence(path)


def test_dimension_mismatch(tmp_path):
    path = tmp_path / "short.kmm"
    path.write_bytes(HEADER.pack(b"KMM1", 1, 3, 2, 0) + b"\0" * 20)
    with pytest.raises(FormatError, match="dimension mismatch"):
        load_sequence(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "tiny.kmm"
    path.write_bytes(b"KMM1")
    with pytest.raises(FormatError):
        load_sequence(path)


def test_zero_payload(tmp_path):
    path = tmp_path / "z.kmm"
    save_sequence(EmbeddingSequence([[0.0]]), path)
    raw = path.read_bytes()
    assert len(raw) == 20 + 4
    assert raw[20:] == b"\0\0\0\0"


def test_header_layout(tmp_path):
    path = tmp_path / "h.kmm"
    save_sequence(EmbeddingSequence(np.ones((3, 2)), pad_len=1), path)
    raw = path.read_bytes()
    assert raw[:4] == b"KMM1"
    assert struct.unpack("<IIII", raw[4:20]) == (1, 3, 2, 1)
    assert len(raw) - 20 == 24
    assert np.frombuffer(raw[20:], "<f4").tolist() == [1.0] * 6
    assert SequenceFileHeader.unpack(raw) == SequenceFileHeader(b"KMM1", 1, 3, 2, 1)


@pytest.mark.parametrize("fmt", ["kmm", "csv", "json"])
def test_saving_twice_is_byte_identical(tmp_path, fmt):
    seq = EmbeddingSequence(np.random.default_rng(2).normal(size=(5, 4)), pad_len=2)
    save_sequence(seq, tmp_path / f"a.{fmt}")
    save_sequence(seq, tmp_path / f"b.{fmt}")
    assert (tmp_path / f"a.{fmt}").read_bytes() == (tmp_path / f"b.{fmt}").read_bytes()


def test_csv_sidecar_only_when_padded(tmp_path):
    path = tmp_path / "s.csv"
    save_sequence(EmbeddingSequence(np.zeros((3, 1)), pad_len=1), path)
    sidecar = tmp_path / "s.csv.meta.json"
    assert json.loads(sidecar.read_text()) == {"pad_len": 1}
    assert path.read_text().splitlines() == ["0.0", "0.0", "0.0"]
    save_sequence(EmbeddingSequence(np.zeros((3, 1))), path)
    assert not sidecar.exists()


def test_json_layout(tmp_path):
    path = tmp_path / "s.json"
    save_sequence(EmbeddingSequence([[1.5, 2.0], [0.25, -1.0]], pad_len=1), path)
    doc = json.loads(path.read_text())
    assert doc == {"n_rows": 2, "n_cols": 2, "pad_len": 1, "tokens": [[1.5, 2.0], [0.25, -1.0]]}


def test_validate_examples():
    assert validate(EmbeddingSequence(np.zeros((4, 3))))
    x = np.zeros((4, 3))
    x[2, 1] = np.nan
    result = validate(EmbeddingSequence(x))
    assert not result
    assert (result.row, result.col) == (2, 1)
    assert "row 2, column 1" in str(result)
    full = validate(EmbeddingSequence(np.zeros((4, 3)), pad_len=4))
    assert not full
    assert full.message == "padding consumes entire sequence"


def test_validate_shape_violations():
    assert validate(EmbeddingSequence(np.zeros((0, 3)))).message == "sequence has no tokens"
    assert validate(EmbeddingSequence(np.zeros((3, 0)))).message == "latent dimension is zero"
    assert not validate(EmbeddingSequence(np.zeros((3, 1)), pad_len=-1))
    with pytest.raises(ValidationError):
        EmbeddingSequence(np.zeros(3))


@given(
    st.integers(1, 8),
    st.integers(1, 4),
    st.integers(0, 9),
    st.sampled_from([None, np.nan, np.inf, -np.inf]),
    st.data(),
)
def test_validate_detects_exactly_planted_violations(n, l, pad, bad, data):
    x = np.zeros((n, l))
    where = None
    if bad is not None:
        where = (data.draw(st.integers(0, n - 1)), data.draw(st.integers(0, l - 1)))
        x[where] = bad
    result = validate(EmbeddingSequence(x, pad))
    assert bool(result) == (bad is None and pad < n)
    if pad < n and bad is not None:
        assert (result.row, result.col) == where


def test_load_rejects_invalid_content(tmp_path):
    path = tmp_path / "nan.kmm"
    write_matrix(path, np.zeros((2, 2)), pad_len=2)
    assert read_sequence(path).pad_len == 2
    with pytest.raises(ValidationError, match="padding"):
        load_sequence(path)
    path.write_bytes(HEADER.pack(b"KMM1", 1, 1, 1, 0) + np.array([np.nan], "<f4").tobytes())
    with pytest.raises(ValidationError, match="non-finite"):
        load_sequence(path)


def test_save_rejects_float32_overflow(tmp_path):
    with pytest.raises(ValidationError):
        save_sequence(EmbeddingSequence([[1e300]]), tmp_path / "big.kmm")


def test_infer_format():
    assert infer_format("a.kmm") == "binary"
    assert infer_format("a.CSV") == "csv"
    assert infer_format("a.json") == "json"
    with pytest.raises(FormatError):
        infer_format("a.txt")


def test_explicit_format_overrides_suffix(tmp_path):
    path = tmp_path / "data.txt"
    save_sequence(EmbeddingSequence([[3.0]]), path, format="csv")
    assert load_sequence(path, format="csv").tokens.tolist() == [[3.0]]


def test_sequence_is_immutable():
    seq = EmbeddingSequence([[1.0, 2.0]])
    with pytest.raises(ValueError):
        seq.tokens[0, 0] = 5.0


def test_padded_sequence():
    seq = EmbeddingSequence([[1.0], [2.0]]).padded(3, fill=9.0)
    assert (seq.n_tokens, seq.n_active, seq.pad_len) == (5, 2, 3)
    assert seq.active.tolist() == [[1.0], [2.0]]


def test_trajectory_checks(tmp_path):
    with pytest.raises(ValidationError):
        MotionTrajectory(np.zeros((3, 2)), fps=0)
    with pytest.raises(ValidationError):
        MotionTrajectory([[np.inf]])
    path = tmp_path / "t.kmm"
    save_sequence(EmbeddingSequence(np.arange(8.0).reshape(4, 2), pad_len=1), path)
    traj = load_trajectory(path, fps=30)
    assert traj.n_frames == 3 and traj.fps == 30.0
