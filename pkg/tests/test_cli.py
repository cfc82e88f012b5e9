import json

import numpy as np
import pytest

from fsml.cli import main
from fsml.episodes import dirichlet_query_counts
from fsml.store import load_store, save_manifest, SplitManifest
from fsml.synthetic import SyntheticSpec, generate, load_truth
from fsml import store as store_mod


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    store, truth = generate(SyntheticSpec(10, 16, 60, seed=21))
    store_path = d / "synth.fsem"
    store_mod.save_store(store, store_path)
    manifest = SplitManifest(
        splits={"val": frozenset(range(5)), "test": frozenset(range(5, 10))}
    )
    man_path = d / "manifest.json"
    save_manifest(manifest, man_path)
    return d, store_path, man_path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


class TestSynthCommand:
    def test_synth_writes_store_and_truth(self, tmp_path, capsys):
        out = tmp_path / "s.fsem"
        code, _, err = run(
            capsys, "synth", "--classes", 4, "--dim", 8, "--per-class", 5,
            "--seed", 3, "--out", out,
        )
        assert code == 0
        st = load_store(out)
        assert st.num_samples == 20 and st.dim == 8 and st.nonneg
        truth = load_truth(tmp_path / "s.truth.json")
        assert truth.lam.shape == (4, 8)

    def test_synth_byte_identical_for_same_seed(self, tmp_path, capsys):
        a, b = tmp_path / "a.fsem", tmp_path / "b.fsem"
        for p in (a, b):
            code, _, _ = run(
                capsys, "synth", "--classes", 3, "--dim", 4, "--per-class", 6,
                "--seed", 11, "--out", p,
            )
            assert code == 0
        assert a.read_bytes() == b.read_bytes()


class TestEvalCommand:
    def test_report_structure_and_determinism(self, workdir, capsys):
        d, store_path, man_path = workdir
        args = (
            "eval", "--store", store_path, "--manifest", man_path, "--split", "test",
            "--metric", "mll", "--n-way", 3, "--k-shot", 1, "--queries", 5,
            "--episodes", 40, "--seed", 9,
        )
        code, out1, _ = run(capsys, *args)
        assert code == 0
        code, out2, _ = run(capsys, *args)
        assert out1 == out2
        rep = json.loads(out1)
        assert rep["command"] == "eval"
        cfg = rep["config"]
        assert cfg["metric"] == "mll" and cfg["n_way"] == 3 and cfg["seed"] == 9
        assert cfg["lambda_max"] == 40.0  # resolved default is echoed
        res = rep["results"]
        assert 0.0 <= res["mean_accuracy"] <= 1.0
        assert res["ci95_halfwidth"] >= 0
        assert res["episodes"] == 40

    def test_zero_episodes_is_an_error(self, workdir, capsys):
        d, store_path, _ = workdir
        code, out, err = run(
            capsys, "eval", "--store", store_path, "--episodes", 0,
            "--n-way", 3, "--queries", 2,
        )
        assert code == 1
        assert out == ""
        assert "episode count" in err

    def test_thread_count_does_not_change_report(self, workdir, capsys):
        d, store_path, man_path = workdir
        outs = []
        for threads, name in ((1, "t1.json"), (8, "t8.json")):
            out_path = d / name
            code, _, _ = run(
                capsys, "eval", "--store", store_path, "--manifest", man_path,
                "--split", "val", "--metric", "euclid", "--n-way", 3,
                "--queries", 4, "--episodes", 60, "--seed", 4,
                "--threads", threads, "--out", out_path,
            )
            assert code == 0
            outs.append(out_path.read_bytes())
        assert outs[0] == outs[1]

    def test_combined_requires_fusion_model(self, workdir, capsys):
        d, store_path, _ = workdir
        code, _, err = run(
            capsys, "eval", "--store", store_path, "--metric", "combined",
            "--episodes", 2, "--n-way", 3, "--queries", 2,
        )
        assert code == 1
        assert "fusion" in err

    def test_missing_store_errors(self, workdir, capsys):
        code, _, err = run(capsys, "eval", "--store", "/nonexistent/x.fsem")
        assert code == 1

    def test_env_var_thread_fallback(self, workdir, capsys, monkeypatch):
        d, store_path, _ = workdir
        monkeypatch.setenv("FSML_THREADS", "2")
        code, out, _ = run(
            capsys, "eval", "--store", store_path, "--n-way", 3,
            "--queries", 2, "--episodes", 10,
        )
        assert code == 0


class TestTransductiveCommand:
    def test_report_contains_paired_baseline(self, workdir, capsys):
        d, store_path, man_path = workdir
        code, out, _ = run(
            capsys, "transductive", "--store", store_path, "--manifest", man_path,
            "--split", "test", "--n-way", 3, "--query-total", 20,
            "--episodes", 30, "--seed", 5,
        )
        assert code == 0
        rep = json.loads(out)
        res = rep["results"]
        assert {"inductive_mll", "transductive", "gain"} <= set(res)
        assert rep["config"]["iters"] == 10
        assert rep["config"]["eta"] == 0.5
        assert rep["config"]["dirichlet_a"] == 2.0

    def test_zero_iters_matches_inductive_exactly(self, workdir, capsys):
        d, store_path, _ = workdir
        code, out, _ = run(
            capsys, "transductive", "--store", store_path, "--n-way", 3,
            "--query-total", 15, "--episodes", 25, "--iters", 0, "--seed", 2,
        )
        assert code == 0
        res = json.loads(out)["results"]
        assert res["inductive_mll"] == res["transductive"]
        assert res["gain"]["mean"] == 0.0

    def test_thread_count_does_not_change_report(self, workdir, capsys):
        d, store_path, _ = workdir
        outs = []
        for threads, name in ((1, "tr1.json"), (8, "tr8.json")):
            out_path = d / name
            code, _, _ = run(
                capsys, "transductive", "--store", store_path, "--n-way", 3,
                "--query-total", 12, "--episodes", 40, "--seed", 6,
                "--threads", threads, "--out", out_path,
            )
            assert code == 0
            outs.append(out_path.read_bytes())
        assert outs[0] == outs[1]

    def test_huge_concentration_approaches_balanced_counts(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            qc = dirichlet_query_counts(5, 75, 1e9, rng)
            assert np.all(np.abs(qc.counts - 15) <= 1)


class TestFitFusionCommand:
    def test_degraded_single_store_mode(self, workdir, capsys):
        d, store_path, man_path = workdir
        model_path = d / "fusion.json"
        code, out, _ = run(
            capsys, "fit-fusion", "--store", store_path, "--manifest", man_path,
            "--split", "val", "--n-way", 3, "--queries", 5,
            "--fit-episodes", 30, "--model-out", model_path, "--seed", 8,
        )
        assert code == 0
        doc = json.loads(model_path.read_text())
        assert doc["degraded"] is True
        rep = json.loads(out)
        agree = rep["results"]["agreement"]
        assert 0.0 <= agree["unanimous"] <= 1.0
        assert agree["unanimous"] <= min(
            agree["euclid_cosine"], agree["euclid_mll"], agree["cosine_mll"]
        )

    def test_model_round_trip_same_combined_accuracy(self, workdir, capsys):
        d, store_path, man_path = workdir
        model_path = d / "fusion_rt.json"
        code, _, _ = run(
            capsys, "fit-fusion", "--store", store_path, "--manifest", man_path,
            "--split", "val", "--n-way", 3, "--queries", 5,
            "--fit-episodes", 30, "--model-out", model_path,
        )
        assert code == 0
        evals = []
        for _ in range(2):
            code, out, _ = run(
                capsys, "eval", "--store", store_path, "--manifest", man_path,
                "--split", "test", "--metric", "combined", "--fusion", model_path,
                "--n-way", 3, "--queries", 3, "--episodes", 8, "--seed", 3,
            )
            assert code == 0
            evals.append(json.loads(out)["results"]["mean_accuracy"])
        assert evals[0] == evals[1]

    def test_three_store_pipeline(self, workdir, capsys, tmp_path):
        # same samples "embedded by three networks": scaled copies keep the
        # labels aligned while distinguishing the embeddings
        d, store_path, man_path = workdir
        base = load_store(store_path)
        paths = []
        for i, scale in enumerate((1.0, 2.0, 0.5)):
            p = tmp_path / f"m{i}.fsem"
            store_mod.save_store(
                store_mod.EmbeddingStore(
                    dim=base.dim,
                    features=base.features * scale,
                    labels=base.labels,
                    nonneg=True,
                ),
                p,
            )
            paths.append(p)
        model_path = tmp_path / "fusion3.json"
        code, _, _ = run(
            capsys, "fit-fusion",
            "--store-euc", paths[0], "--store-cos", paths[1], "--store-mll", paths[2],
            "--manifest", man_path, "--split", "val", "--n-way", 3, "--queries", 4,
            "--fit-episodes", 25, "--model-out", model_path,
        )
        assert code == 0
        assert json.loads(model_path.read_text())["degraded"] is False
        code, out, _ = run(
            capsys, "eval",
            "--store-euc", paths[0], "--store-cos", paths[1], "--store-mll", paths[2],
            "--manifest", man_path, "--split", "test", "--metric", "combined",
            "--fusion", model_path, "--n-way", 3, "--queries", 2, "--episodes", 6,
        )
        assert code == 0
        assert 0.0 <= json.loads(out)["results"]["mean_accuracy"] <= 1.0

    def test_partial_triple_store_flags_rejected(self, workdir, capsys):
        d, store_path, _ = workdir
        code, _, err = run(
            capsys, "eval", "--store-euc", store_path, "--episodes", 5,
        )
        assert code == 1
        assert "all of" in err

    def test_insufficient_fit_episodes_fail_nonzero(self, workdir, capsys):
        d, store_path, man_path = workdir
        # zero fit episodes -> no samples -> fit error propagates to exit code
        code, _, err = run(
            capsys, "fit-fusion", "--store", store_path, "--manifest", man_path,
            "--split", "val", "--fit-episodes", 0, "--n-way", 3, "--queries", 2,
            "--model-out", d / "nope.json",
        )
        assert code == 1
        assert err


class TestDiagnoseCommand:
    def test_csv_emitted(self, workdir, capsys):
        d, store_path, _ = workdir
        out_path = d / "feat.csv"
        code, _, err = run(
            capsys, "diagnose", "--store", store_path, "--class", 2,
            "--feature", 1, "--out", out_path,
        )
        assert code == 0
        header = out_path.read_text().splitlines()[0]
        assert header == "z,empirical_density,fitted_density"
        assert "lambda=" in err

    def test_unknown_class_nonzero_exit(self, workdir, capsys):
        d, store_path, _ = workdir
        code, _, err = run(
            capsys, "diagnose", "--store", store_path, "--class", 999, "--feature", 0,
        )
        assert code == 1
        assert "class" in err

    def test_stdout_csv_when_no_out(self, workdir, capsys):
        d, store_path, _ = workdir
        code, out, _ = run(
            capsys, "diagnose", "--store", store_path, "--class", 0, "--feature", 0,
        )
        assert code == 0
        assert out.startswith("z,empirical_density,fitted_density")

    def test_fitted_rate_matches_generator_truth(self, tmp_path, capsys):
        # synth a large class, diagnose it, and check the fitted rate against
        # the persisted ground truth
        store_path = tmp_path / "big.fsem"
        code, _, _ = run(
            capsys, "synth", "--classes", 2, "--dim", 3, "--per-class", 20000,
            "--seed", 13, "--out", store_path,
        )
        assert code == 0
        truth = load_truth(tmp_path / "big.truth.json")
        code, _, err = run(
            capsys, "diagnose", "--store", store_path, "--class", 1, "--feature", 2,
        )
        assert code == 0
        fitted = float(err.split("lambda=")[1].split()[0])
        true_rate = truth.lam[1, 2]
        assert fitted == pytest.approx(true_rate, rel=0.05)
