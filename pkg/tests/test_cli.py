import numpy as np
import pytest

from acsseg import cli
from acsseg.data import read_volume, synth_dataset, write_volume
from acsseg.plan import default_plan
from acsseg.train import LossConfig, TrainConfig, save_config
from test_postproc import et_fixture

TINY = "2,2,3,3,4,4"


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    synth_dataset(root, 4, (16, 16, 16), seed=0)
    return root


@pytest.fixture
def quick_config(tmp_path):
    path = tmp_path / "cfg.json"
    save_config(path, train=TrainConfig(epochs=1, iterations_per_epoch=2, batch_size=2),
                loss=LossConfig())
    return path


def test_build_and_params(capsys, tmp_path):
    for variant in ("acs", "baseline"):
        code, out, _ = run(capsys, "build", "--variant", variant, "--out", tmp_path / f"{variant}.plan")
        assert code == 0 and variant in out
    code, out, _ = run(capsys, "params", "--plan", tmp_path / "acs.plan",
                       "--baseline", tmp_path / "baseline.plan")
    assert code == 0
    fields = dict(line.split("\t")[:2] for line in out.splitlines())
    assert int(fields["total"]) == default_plan("acs").segmenter_param_count()
    assert int(fields["baseline"]) == default_plan("baseline").segmenter_param_count()
    assert float(fields["ratio"]) == pytest.approx(int(fields["total"]) / int(fields["baseline"]),
                                                   abs=1e-4)


def test_post_reports_suppression(capsys, tmp_path):
    write_volume(tmp_path / "et150.acsv", et_fixture(150))
    code, out, _ = run(capsys, "post", tmp_path / "et150.acsv", "--et-threshold", 200,
                       "--out", tmp_path / "o.acsv")
    assert code == 0 and out.strip() == "ET suppressed (150 < 200)"
    assert not (read_volume(tmp_path / "o.acsv").data == 4).any()
    write_volume(tmp_path / "et1000.acsv", et_fixture(1000))
    code, out, _ = run(capsys, "post", tmp_path / "et1000.acsv", "--et-threshold", 200,
                       "--out", tmp_path / "k.acsv")
    assert out.strip() == "ET kept (1000 >= 200)"
    assert (tmp_path / "k.acsv").read_bytes() == (tmp_path / "et1000.acsv").read_bytes()
    code, out, _ = run(capsys, "post", tmp_path / "et1000.acsv", "--profile", "brats2020",
                       "--out", tmp_path / "k.acsv")
    assert out.strip() == "ET kept (1000 >= 1000)"


@pytest.mark.parametrize("workers", [1, 2])
def test_eval_identical_dirs(capsys, tmp_path, dataset, workers):
    code, _, _ = run(capsys, "eval", "--pred", dataset, "--gt", dataset, "--out",
                     tmp_path / "r.tsv", "--summary", tmp_path / "s.json", "--workers", workers)
    assert code == 0
    rows = [line.split("\t") for line in (tmp_path / "r.tsv").read_text().splitlines()]
    assert rows[0][2] == "dice" and len(rows) == 1 + 4 * 3
    assert all(float(r[2]) == 1.0 for r in rows[1:])
    assert [r[0] for r in rows[1::3]] == [f"case_{i:03d}" for i in range(4)]


def test_transfer_prints_report(capsys, tmp_path):
    run(capsys, "build", "--variant", "acs", "--channels", TINY, "--out", tmp_path / "p.plan")
    run(capsys, "make-store", "--out", tmp_path / "r18.acsw")
    code, out, _ = run(capsys, "transfer", "--plan", tmp_path / "p.plan", "--store",
                       tmp_path / "r18.acsw", "--strategy", "all", "--out", tmp_path / "w.acsw")
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("target\tstrategy") and lines[-1].startswith("# exact=")
    assert (tmp_path / "w.acsw").exists()


def test_train_infer_eval_workflow(capsys, tmp_path, dataset, quick_config):
    run(capsys, "build", "--variant", "acs", "--channels", TINY, "--out", tmp_path / "p.plan")
    code, out, _ = run(capsys, "train", "--plan", tmp_path / "p.plan", "--data", dataset,
                       "--config", quick_config, "--curve", tmp_path / "c.tsv",
                       "--out", tmp_path / "w.acsw")
    assert code == 0 and "trained 2 iterations" in out
    assert len((tmp_path / "c.tsv").read_text().splitlines()) == 3
    code, out, _ = run(capsys, "infer", "--plan", tmp_path / "p.plan", "--weights",
                       tmp_path / "w.acsw", "--data", dataset, "--et-threshold", 200,
                       "--out", tmp_path / "pred")
    assert code == 0 and len(out.splitlines()) == 4
    code, _, _ = run(capsys, "eval", "--pred", tmp_path / "pred", "--gt", dataset,
                     "--out", tmp_path / "r.tsv")
    assert code == 0


def test_data_dir_from_environment(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("ACSSEG_DATA_DIR", str(tmp_path / "env"))
    code, out, _ = run(capsys, "synth", "--n", 2, "--dims", "16,16,16")
    assert code == 0 and (tmp_path / "env" / "dataset.json").exists()
    assert "1 HGG, 1 LGG" in out


def test_jcs_workflow(capsys, tmp_path, dataset, quick_config):
    run(capsys, "build", "--variant", "jcs", "--norm", "batch", "--channels", TINY,
        "--out", tmp_path / "j.plan")
    code, _, _ = run(capsys, "train", "--plan", tmp_path / "j.plan", "--data", dataset,
                     "--task", "classifier", "--config", quick_config, "--out", tmp_path / "c.acsw")
    assert code == 0
    code, _, err = run(capsys, "train", "--plan", tmp_path / "j.plan", "--data", dataset,
                       "--config", quick_config, "--out", tmp_path / "s.acsw")
    assert code == 1 and "--classifier" in err
    code, _, _ = run(capsys, "train", "--plan", tmp_path / "j.plan", "--data", dataset,
                     "--config", quick_config, "--classifier", tmp_path / "c.acsw",
                     "--out", tmp_path / "s.acsw")
    assert code == 0


def test_usage_errors_exit_1(capsys, tmp_path):
    assert run(capsys)[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "params")[0] == 1
    write_volume(tmp_path / "v.acsv", et_fixture(5))
    code, _, err = run(capsys, "post", tmp_path / "v.acsv", "--profile", "brats2018",
                       "--et-threshold", 5, "--out", tmp_path / "o.acsv")
    assert code == 1 and "either" in err


def test_data_errors_exit_2(capsys, tmp_path):
    (tmp_path / "bad.acsv").write_bytes(b"garbage")
    code, _, err = run(capsys, "post", tmp_path / "bad.acsv", "--out", tmp_path / "o.acsv")
    assert code == 2 and "magic" in err
    (tmp_path / "bad.plan").write_text("{")
    assert run(capsys, "params", "--plan", tmp_path / "bad.plan")[0] == 2
    assert run(capsys, "params", "--plan", tmp_path / "missing.plan")[0] == 2
    code, _, err = run(capsys, "train", "--plan", tmp_path / "bad.plan", "--data", tmp_path,
                       "--out", tmp_path / "w.acsw")
    assert code == 2 and "Traceback" not in err


def test_mixed_extents_exit_2(capsys, tmp_path, quick_config):
    synth_dataset(tmp_path / "d", 2, (16, 16, 16))
    write_volume(tmp_path / "d" / "case_000" / "T1.acsv", np.zeros((16, 16, 18), np.float32))
    run(capsys, "build", "--variant", "acs", "--channels", TINY, "--out", tmp_path / "p.plan")
    code, _, err = run(capsys, "train", "--plan", tmp_path / "p.plan", "--data", tmp_path / "d",
                       "--config", quick_config, "--out", tmp_path / "w.acsw")
    assert code == 2 and "extents" in err and not (tmp_path / "w.acsw").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_exit_3(capsys, tmp_path, quick_config):
    synth_dataset(tmp_path / "d", 2, (16, 16, 16))
    vol = read_volume(tmp_path / "d" / "case_000" / "T1.acsv")
    bad = vol.data.copy()
    bad[0, 0, 0] = np.inf
    write_volume(tmp_path / "d" / "case_000" / "T1.acsv", bad)
    write_volume(tmp_path / "d" / "case_001" / "T1.acsv", bad)
    run(capsys, "build", "--variant", "acs", "--channels", TINY, "--out", tmp_path / "p.plan")
    code, _, err = run(capsys, "train", "--plan", tmp_path / "p.plan", "--data", tmp_path / "d",
                       "--config", quick_config, "--out", tmp_path / "w.acsw")
    assert code == 3 and "numeric" in err


def test_bench(capsys, tmp_path):
    run(capsys, "build", "--variant", "acs", "--channels", TINY, "--out", tmp_path / "p.plan")
    code, out, _ = run(capsys, "bench", "--plan", tmp_path / "p.plan", "--size", "16,16,16",
                       "--reps", 2)
    assert code == 0 and out.startswith("forward acs (1, 4, 16, 16, 16)")
