import numpy as np
import pytest

from loopdet.cli import RunConfig, main


def run(argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def synth_paths(tmp_path_factory):
    """Small synthetic container with one revisit segment plus ground truth."""
    root = tmp_path_factory.mktemp("cli")
    feats, gt = root / "feats.fftc", root / "gt.csv"
    code = run(
        ["synth", "--frames", 160, "--segments", "10:80:30", "--dim-global", 32,
         "--features-per-frame", 30, "--psi", 2, "--phi", 10, "--seed", 11,
         "--out", feats, "--gt", gt]
    )
    assert code == 0
    return feats, gt


DETECT_FLAGS = ["--psi", 2, "--phi", 10, "--n", 3, "--M", 8,
                "--ef-construction", 24, "--ef-search", 24, "--seed", 11]


class TestRunConfig:
    def test_text_round_trip(self):
        cfg = RunConfig(psi=12.5, n=7, tau_range=(2, 30, 4), features="a.fftc")
        assert RunConfig.from_text(cfg.to_text()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown key"):
            RunConfig.from_text("bogus=1\n")

    def test_comments_ignored(self):
        cfg = RunConfig.from_text("# comment\npsi=5\n\nn=2\n")
        assert cfg.psi == 5.0 and cfg.n == 2


class TestDetect:
    def test_detections_csv_is_exclusion_safe(self, synth_paths, tmp_path):
        feats, _ = synth_paths
        out = tmp_path / "det.csv"
        assert run(["detect", "--features", feats, "--out", out, "--tau", 10] + DETECT_FLAGS) == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "query_frame,matched_frame,inliers,similarity"
        assert len(lines) > 1
        for line in lines[1:]:
            q, m, inl, sim = line.split(",")
            assert int(q) - int(m) >= 20  # psi * phi
            assert int(inl) >= 10

    def test_no_revisits_empty_csv(self, tmp_path):
        feats = tmp_path / "plain.fftc"
        assert run(["synth", "--frames", 60, "--segments", "", "--dim-global", 16,
                    "--features-per-frame", 10, "--psi", 2, "--phi", 10,
                    "--seed", 3, "--out", feats]) == 0
        out = tmp_path / "det.csv"
        assert run(["detect", "--features", feats, "--out", out] + DETECT_FLAGS) == 0
        assert out.read_text() == "query_frame,matched_frame,inliers,similarity\n"

    def test_missing_file_exits_2_without_output(self, tmp_path):
        out = tmp_path / "det.csv"
        code = run(["detect", "--features", tmp_path / "absent.fftc", "--out", out])
        assert code == 2
        assert not out.exists()

    def test_corrupt_file_exits_2_without_output(self, synth_paths, tmp_path):
        feats, _ = synth_paths
        bad = tmp_path / "bad.fftc"
        bad.write_bytes(open(feats, "rb").read()[:-20])
        out = tmp_path / "det.csv"
        assert run(["detect", "--features", bad, "--out", out] + DETECT_FLAGS) == 2
        assert not out.exists()

    def test_byte_identical_reruns(self, synth_paths, tmp_path):
        feats, _ = synth_paths
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            assert run(["detect", "--features", feats, "--out", out, "--tau", 10]
                       + DETECT_FLAGS) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_config_file_with_flag_override(self, synth_paths, tmp_path):
        feats, _ = synth_paths
        config = tmp_path / "run.cfg"
        config.write_text(
            f"features={feats}\npsi=2\nphi=10\nn=3\nM=8\n"
            "ef_construction=24\nef_search=24\nseed=11\ntau=10\n"
        )
        out = tmp_path / "det.csv"
        assert run(["detect", "--config", config, "--out", out]) == 0
        baseline = out.read_bytes()
        # overriding tau via flag beats the config file
        out2 = tmp_path / "det2.csv"
        assert run(["detect", "--config", config, "--out", out2, "--tau", 10_000]) == 0
        assert out2.read_text() == "query_frame,matched_frame,inliers,similarity\n"
        assert baseline != out2.read_bytes()

    def test_config_echoed_to_stderr(self, synth_paths, tmp_path, capsys):
        feats, _ = synth_paths
        out = tmp_path / "det.csv"
        run(["detect", "--features", feats, "--out", out, "--tau", 10] + DETECT_FLAGS)
        err = capsys.readouterr().err
        assert "resolved config:" in err
        assert "psi=2.0" in err and "epsilon=0.7" in err and "delta=15.0" in err


class TestEval:
    def test_pr_csv_and_summary(self, synth_paths, tmp_path, capsys):
        feats, gt = synth_paths
        out = tmp_path / "pr.csv"
        code = run(["eval", "--features", feats, "--gt", gt, "--out", out,
                    "--tau-range", "0:30:5"] + DETECT_FLAGS)
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "tau,precision,recall,tp,fp,fn"
        assert len(lines) == 8  # taus 0,5,...,30
        summary = capsys.readouterr().out
        assert "recall_at_100_precision=" in summary

    def test_beta_one_reaches_full_recall(self, synth_paths, tmp_path, capsys):
        feats, gt = synth_paths
        code = run(["eval", "--features", feats, "--gt", gt, "--beta", 1,
                    "--tau-range", "10:10"] + DETECT_FLAGS)
        assert code == 0
        out = capsys.readouterr().out
        assert "recall_at_100_precision=1.000000" in out


class TestSynth:
    def test_byte_identical_given_seed(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            feats = tmp_path / f"{name}.fftc"
            gt = tmp_path / f"{name}.csv"
            assert run(["synth", "--frames", 80, "--segments", "5:40:10",
                        "--dim-global", 16, "--features-per-frame", 12,
                        "--psi", 2, "--phi", 10, "--seed", 9,
                        "--out", feats, "--gt", gt]) == 0
            outs.append((feats.read_bytes(), gt.read_bytes()))
        assert outs[0] == outs[1]

    def test_invalid_segments_exit_1(self, tmp_path):
        code = run(["synth", "--frames", 80, "--segments", "5:10:10",
                    "--psi", 2, "--phi", 10, "--out", tmp_path / "x.fftc"])
        assert code == 1


class TestBench:
    def test_tables_written_with_monotone_ef_recall(self, tmp_path):
        out = tmp_path / "bench"
        code = run(["bench", "--out", out, "--bench-vectors", 400,
                    "--bench-queries", 50, "--bench-frames", 120,
                    "--psi", 2, "--phi", 10, "--seed", 5, "--M", 8,
                    "--ef-construction", 24, "--ef-search", 24,
                    "--ef-list", "20,40,80", "--m-list", "6,8",
                    "--n-list", "1,3", "--tau-range", "0:20:5"])
        assert code == 0
        ef_rows = (out / "ef_sweep.csv").read_text().strip().splitlines()
        assert ef_rows[0] == "ef,recall,mean_insert_ms,mean_query_ms"
        assert len(ef_rows) == 4
        recalls = [float(r.split(",")[1]) for r in ef_rows[1:]]
        for lo, hi in zip(recalls, recalls[1:]):
            assert hi >= lo - 0.02
        timing = (out / "timing.csv").read_text().splitlines()
        assert timing[0] == "stage,mean_ms,std_ms,max_ms,min_ms"
        assert len(timing) > 1
        assert (out / "m_sweep.csv").exists()
        n_rows = (out / "n_sweep.csv").read_text().strip().splitlines()
        assert n_rows[0] == "n,recall_at_100_precision,mean_frame_ms"
        assert len(n_rows) == 3


class TestPcaFit:
    def test_fits_model_from_container(self, tmp_path):
        feats = tmp_path / "raw.fftc"
        assert run(["synth", "--frames", 50, "--segments", "", "--dim-global", 16,
                    "--dim-local", 64, "--features-per-frame", 20,
                    "--psi", 2, "--phi", 10, "--seed", 4, "--out", feats]) == 0
        model_path = tmp_path / "model.fpca"
        assert run(["pca-fit", "--features", feats, "--out", model_path,
                    "--out-dim", 40]) == 0
        from loopdet import load_pca_model

        model = load_pca_model(model_path)
        assert (model.raw_dim, model.out_dim) == (64, 40)
        gram = model.basis.T @ model.basis
        assert np.abs(gram - np.eye(40)).max() < 1e-5

    def test_detect_applies_model_to_raw_locals(self, tmp_path):
        feats = tmp_path / "raw.fftc"
        assert run(["synth", "--frames", 120, "--segments", "10:60:20",
                    "--dim-global", 32, "--dim-local", 64,
                    "--features-per-frame", 30, "--psi", 2, "--phi", 10,
                    "--seed", 4, "--out", feats]) == 0
        model_path = tmp_path / "model.fpca"
        assert run(["pca-fit", "--features", feats, "--out", model_path,
                    "--out-dim", 40]) == 0
        out = tmp_path / "det.csv"
        assert run(["detect", "--features", feats, "--pca", model_path,
                    "--out", out, "--tau", 10] + DETECT_FLAGS) == 0
        assert len(out.read_text().splitlines()) > 1
