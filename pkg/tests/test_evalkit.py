import itertools

import numpy as np
import pytest

from conftest import EIMM_MATRIX, SED_MATRIX
from spcnn import data, evalkit, spnet
from spcnn.errors import DataError
from spcnn.pyramid import RasterImage


def test_eimm_average_accuracy():
    assert abs(evalkit.average_accuracy(EIMM_MATRIX) - 79.29) <= 0.01
    assert evalkit.average_accuracy(EIMM_MATRIX) == pytest.approx(79.2875)


def test_sed_average_accuracy():
    assert abs(evalkit.average_accuracy(SED_MATRIX) - 72.0) <= 0.05


def test_published_rows_sum_to_about_100():
    for m in (EIMM_MATRIX, SED_MATRIX):
        assert np.all(np.abs(m.sum(axis=1) - 100) <= 0.15)


def test_identity_confusion():
    cm = evalkit.confusion_matrix([(i, i) for i in range(5)], 5)
    assert evalkit.average_accuracy(cm) == 100.0
    assert np.array_equal(cm.row_normalized, 100 * np.eye(5))


def test_split_row():
    cm = evalkit.confusion_matrix([(0, 0), (0, 1)], 2)
    assert cm.row_normalized[0].tolist() == [50.0, 50.0]
    assert cm.empty_rows == [1]
    with pytest.raises(DataError):
        evalkit.average_accuracy(cm)


def test_confusion_against_brute_force(rng):
    k = 4
    pairs = [tuple(map(int, p)) for p in rng.integers(0, k, (200, 2))]
    cm = evalkit.confusion_matrix(pairs, k)
    for a, p in itertools.product(range(k), repeat=2):
        assert cm.counts[a, p] == sum(1 for x in pairs if x == (a, p))
    assert cm.counts.sum() == 200
    assert np.array_equal(cm.counts.sum(axis=1), np.bincount([a for a, _ in pairs], minlength=k))
    sums = np.nansum(cm.row_normalized, axis=1)
    np.testing.assert_allclose(sums, 100.0, rtol=1e-12)


def test_confusion_rejects_out_of_range():
    with pytest.raises(DataError, match="pair 1"):
        evalkit.confusion_matrix([(0, 0), (0, 3)], 3)


def test_average_accuracy_rejects_non_square():
    with pytest.raises(DataError):
        evalkit.average_accuracy(np.zeros((2, 3)))


def test_argmax_ties_go_to_lowest():
    assert evalkit.argmax_lowest(np.array([0.2, 0.4, 0.4])) == 1


def test_emit_report_round_trip(tmp_path):
    counts = np.rint(EIMM_MATRIX * 10).astype(np.int64)
    cm = evalkit.ConfusionMatrix(counts)
    avg = evalkit.average_accuracy(cm)
    paths = evalkit.emit_report(cm, avg, tmp_path, data.EIMM_CLASSES)
    names, values = evalkit.read_table(paths["counts"])
    assert names == list(data.EIMM_CLASSES)
    assert np.array_equal(values, counts)
    _, rownorm = evalkit.read_table(paths["rownorm"])
    np.testing.assert_allclose(rownorm, cm.row_normalized, atol=0.05)
    assert (tmp_path / "summary.txt").read_text() == f"average_accuracy={avg:.2f}\n"
    assert abs(evalkit.average_accuracy(rownorm) - 79.29) < 0.05


# -- prediction ----------------------------------------------------------------

@pytest.fixture
def model():
    spec = spnet.desk_spec(3, canonical_size=32, fc6=8, fc7=8, layers=spnet.parse_layers(
        "conv 4 5 2 0, relu, pool 3 2"))
    state = spnet.init_params(spec, 0)
    mean = np.full((3, 32, 32), 100, np.float32)
    return state, spec, mean


def frames(rng, n, size=32):
    return [RasterImage(rng.integers(0, 256, (size, size, 3), dtype=np.uint8)) for _ in range(n)]


def test_video_of_repeated_frame_equals_image(model, rng):
    state, spec, mean = model
    img = frames(rng, 1)[0]
    s_img, p_img = evalkit.predict_image(state, spec, mean, img)
    for agg in ("mean", "vote"):
        s_vid, p_vid = evalkit.predict_video(state, spec, mean, [img] * 4, agg)
        assert p_vid == p_img
    s_vid, _ = evalkit.predict_video(state, spec, mean, [img] * 4, "mean")
    assert np.array_equal(s_vid, s_img)


def test_video_mean_of_frame_scores(model, rng):
    state, spec, mean = model
    fs = frames(rng, 5)
    per = np.stack([evalkit.predict_image(state, spec, mean, f)[0] for f in fs])
    scores, pred = evalkit.predict_video(state, spec, mean, fs)
    np.testing.assert_allclose(scores, per.mean(axis=0), rtol=1e-12)
    assert pred == int(np.argmax(per.mean(axis=0)))
    np.testing.assert_allclose(scores.sum(), 1.0)


def test_video_vote(model, rng, monkeypatch):
    state, spec, mean = model
    fake = np.array([[0.6, 0.4, 0.0], [0.2, 0.8, 0.0], [0.1, 0.0, 0.9], [0.3, 0.7, 0.0]])
    monkeypatch.setattr(evalkit, "image_scores", lambda *a, **k: fake)
    scores, pred = evalkit.predict_video(state, spec, mean, frames(rng, 4), "vote")
    assert scores.tolist() == [0.25, 0.5, 0.25] and pred == 1
    # a vote tie resolves to the lowest class
    monkeypatch.setattr(evalkit, "image_scores", lambda *a, **k: fake[:2])
    assert evalkit.predict_video(state, spec, mean, frames(rng, 2), "vote")[1] == 0


def test_video_without_frames(model):
    with pytest.raises(DataError):
        evalkit.predict_video(*model, [])


def write_split(tmp_path, rng, n_images=4, n_videos=2):
    lines = ["classes: a,b,c"]
    for i in range(n_images):
        data.write_ppm(tmp_path / f"img{i}.ppm", frames(rng, 1)[0])
        lines.append(f"test\timage\t{'abc'[i % 3]}\timg{i}.ppm")
    for v in range(n_videos):
        d = tmp_path / f"vid{v}"
        d.mkdir()
        for j, f in enumerate(frames(rng, 3)):
            data.write_ppm(d / f"frame_{j:04d}.ppm", f)
        lines.append(f"test\tvideo\t{'abc'[v % 3]}\tvid{v}")
    return data.parse_manifest("\n".join(lines) + "\n", root=str(tmp_path))


def test_evaluate_dispatches_images_and_videos(model, rng, tmp_path):
    state, spec, mean = model
    manifest = write_split(tmp_path, rng)
    result = evalkit.evaluate(state, spec, mean, manifest)
    assert [s.path for s in result.samples] == [e.path for e in manifest.entries]
    assert result.confusion.counts.sum() == 6
    vid = data.load_frame_sequence(tmp_path / "vid1")
    assert result.samples[-1].predicted == evalkit.predict_video(state, spec, mean, vid)[1]
    img = data.load_image(tmp_path / "img0.ppm")
    assert result.samples[0].predicted == evalkit.predict_image(state, spec, mean, img)[1]


def test_evaluate_order_independent(model, rng, tmp_path):
    state, spec, mean = model
    manifest = write_split(tmp_path, rng)
    shuffled = data.DatasetManifest(manifest.class_names, list(reversed(manifest.entries)),
                                    manifest.root)
    a = evalkit.evaluate(state, spec, mean, manifest)
    b = evalkit.evaluate(state, spec, mean, shuffled)
    assert np.array_equal(a.confusion.counts, b.confusion.counts)


def test_evaluate_reports_failing_sample(model, rng, tmp_path):
    state, spec, mean = model
    manifest = write_split(tmp_path, rng, n_videos=0)
    (tmp_path / "img2.ppm").write_bytes(b"P6\n32 32\n255\n" + b"\0" * 10)
    with pytest.raises(DataError, match="img2.ppm"):
        evalkit.evaluate(state, spec, mean, manifest)
    with pytest.raises(DataError, match="empty"):
        evalkit.evaluate(state, spec, mean, manifest, role="train")


def test_sample_log(tmp_path):
    samples = [evalkit.SampleResult("x.ppm", 0, 1, 0.25, 0.5)]
    evalkit.write_sample_log(samples, ["a", "b"], tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines() == [
        "path,actual,predicted,score_true,score_pred", "x.ppm,a,b,0.250000,0.500000"]
