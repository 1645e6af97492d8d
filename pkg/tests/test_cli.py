"""End-to-end command-line workflows."""

import json

import numpy as np
import pytest

from globalign.cli import read_alignment, read_config_file, main
from globalign.graph import load_graph, random_graph, save_graph


@pytest.fixture
def instance_dir(tmp_path):
    """50-node graph with one-hot-augmented features, plus an exact copy made by ``perturb``."""
    g = random_graph(50, 4, seed=7, feature_dim=8, one_hot=True)
    src = tmp_path / "src"
    src.mkdir()
    save_graph(g, src / "edges.txt", src / "features.txt")
    assert main(["perturb", "--source-edges", str(src / "edges.txt"), "--source-features", str(src / "features.txt"),
                 "--ratio", "0", "--seed", "1", "--out-dir", str(tmp_path / "tgt")]) == 0
    return tmp_path


def _align_args(d, out, *extra):
    return [
        "align",
        "--source-edges", str(d / "src" / "edges.txt"),
        "--source-features", str(d / "src" / "features.txt"),
        "--target-edges", str(d / "tgt" / "edges.txt"),
        "--target-features", str(d / "tgt" / "features.txt"),
        "--anchors", str(d / "tgt" / "anchors.txt"),
        "--out-dir", str(out),
        *extra,
    ]


class TestAlign:
    def test_self_copy_scores_perfectly(self, instance_dir):
        out = instance_dir / "run"
        assert main(_align_args(instance_dir, out)) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["hits_1"] == 1.0
        assert metrics["anchor_count"] == 50
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "align"
        assert manifest["config"]["variant"] == "dense"
        lines = (out / "alignment.txt").read_text().splitlines()
        assert len(lines) == 50 * 30
        src, tgt, prob = lines[0].split()
        assert (int(src), int(tgt)) == (0, 0) and float(prob) > 0
        trace = (out / "objective_trace.txt").read_text().splitlines()
        assert trace and all(len(t.split()) == 2 for t in trace)

    def test_alignment_lists_descend(self, instance_dir):
        out = instance_dir / "run"
        assert main(_align_args(instance_dir, out, "--variant", "efficient", "--max-outer", "5")) == 0
        per_source = read_alignment(out / "alignment.txt")
        for entries in per_source.values():
            probs = [p for p, _ in entries]
            assert probs == sorted(probs, reverse=True)

    def test_eval_rescores_alignment(self, instance_dir, capsys):
        out = instance_dir / "run"
        assert main(_align_args(instance_dir, out, "--max-outer", "5")) == 0
        stored = json.loads((out / "metrics.json").read_text())
        capsys.readouterr()
        assert main(["eval", "--alignment", str(out / "alignment.txt"), "--anchors", str(instance_dir / "tgt" / "anchors.txt")]) == 0
        rescored = json.loads(capsys.readouterr().out)
        for key in ("hits_1", "hits_5", "hits_10", "hits_30", "mrr", "anchor_count"):
            assert rescored[key] == pytest.approx(stored[key], abs=1e-12)

    def test_missing_feature_file(self, instance_dir, capsys):
        missing = instance_dir / "src" / "nope.txt"
        args = _align_args(instance_dir, instance_dir / "run")
        args[args.index("--source-features") + 1] = str(missing)
        assert main(args) == 1
        assert str(missing) in capsys.readouterr().err

    def test_variant_choices(self, instance_dir, capsys):
        assert main(_align_args(instance_dir, instance_dir / "a", "--variant", "sparse")) == 1
        assert "variant" in capsys.readouterr().err
        for variant in ("dense", "efficient"):
            assert main(_align_args(instance_dir, instance_dir / variant, "--variant", variant, "--max-outer", "2")) == 0

    def test_config_file_and_flag_precedence(self, instance_dir):
        cfg = instance_dir / "run.cfg"
        cfg.write_text("# settings\nvariant = efficient\nmax-outer = 3\nalpha = 0.25\n")
        out = instance_dir / "run"
        assert main(_align_args(instance_dir, out, "--config", str(cfg), "--alpha", "0.75")) == 0
        config = json.loads((out / "manifest.json").read_text())["config"]
        assert (config["variant"], config["max_outer"], config["alpha"]) == ("efficient", 3, 0.75)
        assert len((out / "objective_trace.txt").read_text().splitlines()) <= 3

    def test_bad_config_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("nonsense = 1\n")
        with pytest.raises(ValueError):
            read_config_file(cfg)

    def test_inputs_not_mutated(self, instance_dir):
        before = {p: p.read_bytes() for p in (instance_dir / "src").iterdir()}
        assert main(_align_args(instance_dir, instance_dir / "run", "--max-outer", "2")) == 0
        assert before == {p: p.read_bytes() for p in (instance_dir / "src").iterdir()}


class TestPerturb:
    def test_zero_ratio_reproduces_edges(self, instance_dir):
        src = load_graph(instance_dir / "src" / "edges.txt", instance_dir / "src" / "features.txt")
        tgt = load_graph(instance_dir / "tgt" / "edges.txt", instance_dir / "tgt" / "features.txt")
        np.testing.assert_array_equal(src.edges, tgt.edges)
        assert (instance_dir / "src" / "features.txt").read_bytes() == (instance_dir / "tgt" / "features.txt").read_bytes()

    def test_deterministic(self, instance_dir):
        args = ["perturb", "--source-edges", str(instance_dir / "src" / "edges.txt"),
                "--source-features", str(instance_dir / "src" / "features.txt"), "--ratio", "0.4", "--seed", "7"]
        assert main(args + ["--out-dir", str(instance_dir / "p1")]) == 0
        assert main(args + ["--out-dir", str(instance_dir / "p2")]) == 0
        for name in ("edges.txt", "features.txt", "anchors.txt"):
            assert (instance_dir / "p1" / name).read_bytes() == (instance_dir / "p2" / name).read_bytes()
        assert (instance_dir / "p1" / "edges.txt").read_bytes() != (instance_dir / "src" / "edges.txt").read_bytes()

    def test_identity_anchors(self, instance_dir):
        lines = (instance_dir / "tgt" / "anchors.txt").read_text().splitlines()
        assert lines == [f"{i} {i}" for i in range(50)]

    def test_bad_ratio(self, instance_dir):
        args = ["perturb", "--source-edges", str(instance_dir / "src" / "edges.txt"),
                "--source-features", str(instance_dir / "src" / "features.txt"), "--ratio", "1.5",
                "--out-dir", str(instance_dir / "p")]
        assert main(args) == 1


class TestBench:
    def test_single_size(self, tmp_path, capsys):
        assert main(["bench", "--sizes", "1000", "--out-dir", str(tmp_path)]) == 0
        lines = (tmp_path / "bench.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["n", "seconds_per_iter", "peak_mb"]
        assert len(lines) == 2
        assert capsys.readouterr().out.splitlines() == lines

    def test_two_sizes_increasing(self, capsys):
        assert main(["bench", "--sizes", "1000,2000", "--variant", "efficient"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 3
        times = [float(line.split("\t")[1]) for line in lines[1:]]
        assert 0 < times[0] < times[1]

    @pytest.mark.parametrize("sizes", ["1000,x", "2000,1000", "", "1"])
    def test_bad_sizes(self, sizes):
        assert main(["bench", "--sizes", sizes]) == 1


def test_usage_error_exit_code():
    assert main(["align"]) == 1
    assert main(["frobnicate"]) == 1
