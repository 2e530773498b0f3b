import json

import pandas as pd
import pytest
import yaml
from typer.testing import CliRunner

from app.cli import cli, run
from app.core.errors import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE
from app.fitting.correspondence import load_correspondences
from app.moca.generator import MODEL_FILE
from app.moca.manifest import load_manifest, verify_manifest
from app.render.iuv import load_iuv
from app.schemas.command import SUBCOMMANDS
from app.schemas.metrics import AGGREGATE_ID

SMALL = {"skeleton": "body24", "resolution": 8, "shape_rank": 6}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "densefit.yaml"
    path.write_text(yaml.safe_dump({
        "template": SMALL,
        "fit": {"stride": 2},
        "generate": {"name": "cli", "sequences": 3, "frames": 2, "shapes_per_sequence": 1,
                     "image_size": [64, 64], "stride": 2},
    }), encoding="utf-8")
    return path


class TestGenerate:
    def test_generate_from_a_config_file(self, config_file, tmp_path):
        out = tmp_path / "dataset"
        assert run(["generate", "--out", str(out), "--config", str(config_file), "--seed", "7"]) == EXIT_OK
        manifest = load_manifest(out)
        assert manifest.name == "cli"
        assert manifest.seed == 7
        assert {split: len(manifest.split(split)) for split in ("train", "test")} == {"train": 4, "test": 2}
        assert verify_manifest(manifest, out) == []

    def test_flags_override_the_file(self, config_file, tmp_path):
        out = tmp_path / "dataset"
        assert run(["generate", "--out", str(out), "--config", str(config_file), "--frames", "1"]) == EXIT_OK
        assert len(load_manifest(out).records) == 3

    def test_one_sequence_is_rejected(self, config_file, tmp_path):
        code = run(["generate", "--out", str(tmp_path / "dataset"), "--config", str(config_file),
                    "--sequences", "1"])
        assert code == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        code = run(["generate", "--out", str(tmp_path / "dataset"), "--config", str(tmp_path / "absent.yaml")])
        assert code == EXIT_IO

    def test_unknown_config_section(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("optimizer: {lr: 1}\n", encoding="utf-8")
        assert run(["generate", "--out", str(tmp_path / "dataset"), "--config", str(path)]) == EXIT_USAGE


class TestRender:
    def test_rest_pose(self, config_file, tmp_path):
        out = tmp_path / "rest.driu"
        png = tmp_path / "rest.png"
        code = run(["render", "--out", str(out), "--png", str(png), "--height", "48", "--width", "40",
                    "--config", str(config_file)])
        assert code == EXIT_OK
        image = load_iuv(out)
        assert image.size == (48, 40)
        assert image.foreground_count > 0
        assert png.is_file()
        landmarks = load_correspondences(tmp_path / "rest.csv", 0.05)
        assert len(landmarks) > 0
        assert landmarks.landmarks is not None

    def test_sampled_configuration(self, config_file, tmp_path):
        out = tmp_path / "sample.driu"
        code = run(["render", "--out", str(out), "--seed", "3", "--height", "48", "--width", "48",
                    "--config", str(config_file)])
        assert code == EXIT_OK
        assert load_iuv(out).size == (48, 48)


class TestFitAndEval:
    def test_fit_a_split(self, tiny_dataset, tmp_path):
        root, manifest = tiny_dataset
        out = tmp_path / "fits"
        code = run(["fit", "--dataset", str(root), "--out", str(out), "--split", "test",
                    "--max-iterations", "2", "--supervision", "rpj,adv", "--stride", "2"])
        assert code == EXIT_OK
        for record in manifest.split("test"):
            summary = json.loads((out / f"{record.sample_id}.json").read_text(encoding="utf-8"))
            assert summary["sample_id"] == record.sample_id
            assert summary["iterations"] <= 2
            log = pd.read_csv(out / f"{record.sample_id}_loss.csv")
            assert len(log) == summary["iterations"]
        assert not any(out.glob(f"{manifest.split('train')[0].sample_id}*"))

    def test_fit_a_single_target(self, tiny_dataset, tmp_path):
        root, manifest = tiny_dataset
        target = root / manifest.records[0].iuv_path
        out = tmp_path / "single"
        code = run(["fit", "--target", str(target), "--model", str(root / MODEL_FILE), "--out", str(out),
                    "--max-iterations", "2", "--stride", "2"])
        assert code == EXIT_OK
        assert (out / f"{target.stem}.json").is_file()

    def test_fit_a_rendered_target_at_its_fixed_point(self, config_file, tmp_path):
        target = tmp_path / "rest.driu"
        assert run(["render", "--out", str(target), "--height", "64", "--width", "64",
                    "--config", str(config_file)]) == EXIT_OK
        out = tmp_path / "fits"
        code = run(["fit", "--target", str(target), "--out", str(out), "--supervision", "rpj,adv",
                    "--config", str(config_file)])
        assert code == EXIT_OK
        log = pd.read_csv(out / "rest_loss.csv")
        assert log["total"].iloc[-1] < 1e-6
        assert json.loads((out / "rest.json").read_text(encoding="utf-8"))["converged"]

    def test_fit_needs_exactly_one_input(self, tiny_dataset, tmp_path):
        root, manifest = tiny_dataset
        target = root / manifest.records[0].iuv_path
        assert run(["fit", "--out", str(tmp_path)]) == EXIT_USAGE
        assert run(["fit", "--dataset", str(root), "--target", str(target), "--out", str(tmp_path)]) == EXIT_USAGE

    def test_fit_unknown_sample(self, tiny_dataset, tmp_path):
        root, _ = tiny_dataset
        assert run(["fit", "--dataset", str(root), "--out", str(tmp_path), "--sample", "nope"]) == EXIT_USAGE

    def test_fit_unknown_loss_term(self, tiny_dataset, tmp_path):
        root, _ = tiny_dataset
        code = run(["fit", "--dataset", str(root), "--out", str(tmp_path), "--supervision", "rpj,bogus"])
        assert code == EXIT_USAGE

    def test_fit_missing_dataset(self, tmp_path):
        assert run(["fit", "--dataset", str(tmp_path / "absent"), "--out", str(tmp_path)]) == EXIT_IO

    def test_eval_scores_ground_truth_fits(self, tiny_dataset, tmp_path):
        root, manifest = tiny_dataset
        predictions = tmp_path / "fits"
        code = run(["fit", "--dataset", str(root), "--out", str(predictions), "--init", "gt",
                    "--max-iterations", "1", "--supervision", "rpj,adv", "--stride", "2"])
        assert code == EXIT_OK

        out = tmp_path / "eval.csv"
        assert run(["eval", "--dataset", str(root), "--predictions", str(predictions), "--out", str(out),
                    "--split", "all"]) == EXIT_OK
        table = pd.read_csv(out)
        assert table["sample_id"].tolist() == [r.sample_id for r in manifest.records] + [AGGREGATE_ID]
        assert (table["pck"] == 100.0).all()

    def test_eval_skips_missing_predictions(self, tiny_dataset, tmp_path):
        root, manifest = tiny_dataset
        predictions = tmp_path / "fits"
        run(["fit", "--dataset", str(root), "--out", str(predictions), "--init", "gt",
             "--max-iterations", "1", "--supervision", "rpj,adv", "--stride", "2"])
        missing = manifest.records[0].sample_id
        (predictions / f"{missing}.json").unlink()

        out = tmp_path / "eval.csv"
        code = run(["eval", "--dataset", str(root), "--predictions", str(predictions), "--out", str(out),
                    "--split", "all"])
        assert code == EXIT_IO
        table = pd.read_csv(out)
        assert len(table) == len(manifest.records)
        assert missing not in table["sample_id"].tolist()

    def test_eval_unknown_split(self, tiny_dataset, tmp_path):
        root, _ = tiny_dataset
        code = run(["eval", "--dataset", str(root), "--predictions", str(tmp_path), "--out",
                    str(tmp_path / "eval.csv"), "--split", "val"])
        assert code == EXIT_USAGE


class TestGradcheck:
    def test_single_check_passes(self):
        assert run(["gradcheck", "--seeds", "2", "--check", "projection"]) == EXIT_OK

    def test_injected_failure(self):
        assert run(["gradcheck", "--seeds", "1", "--check", "projection", "--inject-failure"]) == EXIT_NUMERIC

    def test_unknown_check(self):
        assert run(["gradcheck", "--seeds", "1", "--check", "hessian"]) == EXIT_USAGE


class TestAblate:
    def test_experiment_table(self, config_file, tmp_path):
        out = tmp_path / "ablation.csv"
        code = run(["ablate", "--out", str(out), "--samples", "1", "--max-iterations", "2",
                    "--height", "64", "--width", "64", "--supervision", "rpj,adv",
                    "--supervision", "rpj,adv,rgr", "--config", str(config_file)])
        assert code == EXIT_OK
        assert pd.read_csv(out)["supervision"].tolist() == ["rpj,adv", "rpj,adv,rgr"]

    def test_unknown_loss_term(self, tmp_path):
        code = run(["ablate", "--out", str(tmp_path / "ablation.csv"), "--supervision", "rpj,depth"])
        assert code == EXIT_USAGE


class TestRunner:
    def test_help_lists_every_subcommand(self):
        result = CliRunner().invoke(cli, ["--help"])
        assert result.exit_code == 0
        for name in SUBCOMMANDS:
            assert name in result.output

    def test_gradcheck_through_the_runner(self):
        result = CliRunner().invoke(cli, ["gradcheck", "--seeds", "1", "--check", "rodrigues"])
        assert result.exit_code == EXIT_OK
        assert "rodrigues" in result.output
