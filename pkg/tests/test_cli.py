import json

import numpy as np
import pytest

from cacp.cli import build_parser, main
from cacp.config import RunConfig, load_config, parse_config_text
from cacp.dataset_io import read_manifest, read_records
from cacp.errors import ConfigError

from conftest import make_classification, make_detection, make_gallery, save_png, tree_bytes

FAKE = ["--backends", "fake"]


@pytest.fixture
def dirs(tmp_path):
    return make_classification(tmp_path / "src"), make_gallery(tmp_path / "gallery"), tmp_path / "out"


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--help"])
    out = capsys.readouterr().out
    for cmd in ("build-gallery", "augment", "evaluate", "preview"):
        assert cmd in out


def test_build_gallery(dirs, capsys):
    _, gallery, _ = dirs
    assert main(["build-gallery", "--gallery-dir", str(gallery), *FAKE]) == 0
    assert (gallery / "cacp-index.tsv").exists() and (gallery / "cacp-ratios.tsv").exists()


def test_augment_end_to_end(dirs, tmp_path, capsys):
    source, gallery, out = dirs
    args = ["augment", "--task", "classification", "--source-dir", str(source), "--gallery-dir", str(gallery),
            "--out-dir", str(out), "--fraction", "1/2", "--prompt-mode", "box+cam", "--points", "3", *FAKE]
    assert main(args) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["images_augmented"] == 10 and report["images_written"] == 20
    assert len(read_manifest(out)) == 20 and len(read_records(out)) == 10
    first = tree_bytes(out)
    assert main(args) == 0
    assert tree_bytes(out) == first


def test_config_file_and_set(dirs, tmp_path, capsys):
    source, gallery, out = dirs
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        f"# toy run\ntask = classification\nsource_dir = {source}\ngallery_dir = {gallery}\n"
        f"output_dir = {out}\nfraction = 1/4\nbackends = fake\n"
    )
    assert main(["augment", "--config", str(cfg), "--set", "variants_per_image=2", "--set", "prompt.mode=box"]) == 0
    records = read_records(out)
    assert len(records) == 10 and {r["prompt_mode"] for r in records} == {"box_only"}


def test_preview(dirs, tmp_path, capsys):
    source, gallery, _ = dirs
    out = tmp_path / "prev"
    code = main(["preview", str(source / "dog" / "img00.png"), "--task", "classification", "--source-dir", str(source),
                 "--gallery-dir", str(gallery), "--out-dir", str(out), *FAKE])
    assert code == 0
    assert {p.name for p in out.iterdir()} == {"caption.txt", "ranking.tsv", "prompt_overlay.png", "composite.png"}


def test_evaluate_to_file(tmp_path):
    truth = make_detection(tmp_path / "t")
    report = tmp_path / "r.tsv"
    assert main(["evaluate", "--pred-dir", str(truth), "--truth-dir", str(truth), "--task", "detection", "--output", str(report)]) == 0
    assert report.read_text().splitlines()[0] == "map50\tall\t1.000000"


class TestExitCodes:
    def test_missing_source_is_config_error(self, dirs):
        _, gallery, out = dirs
        assert main(["augment", "--gallery-dir", str(gallery), "--out-dir", str(out), *FAKE]) == 2

    def test_empty_gallery(self, dirs, tmp_path):
        source, _, out = dirs
        (tmp_path / "empty").mkdir()
        assert main(["augment", "--source-dir", str(source), "--gallery-dir", str(tmp_path / "empty"), "--out-dir", str(out), *FAKE]) == 2

    def test_layout_mismatch(self, dirs):
        source, gallery, out = dirs
        args = ["augment", "--task", "detection", "--source-dir", str(source), "--gallery-dir", str(gallery), "--out-dir", str(out), *FAKE]
        assert main(args) == 2

    def test_malformed_annotation(self, dirs, tmp_path):
        _, gallery, out = dirs
        root = tmp_path / "det"
        save_png(root / "images" / "a.png", np.zeros((8, 8, 3), np.uint8))
        (root / "annotations.json").write_text('{"images": [')
        args = ["augment", "--task", "detection", "--source-dir", str(root), "--gallery-dir", str(gallery), "--out-dir", str(out), *FAKE]
        assert main(args) == 3

    def test_backend_unavailable(self, dirs, monkeypatch):
        source, gallery, out = dirs
        monkeypatch.delenv("CACP_MODEL_DIR", raising=False)
        args = ["augment", "--source-dir", str(source), "--gallery-dir", str(gallery), "--out-dir", str(out),
                *FAKE, "--set", "backends.captioner=real"]
        assert main(args) == 4

    def test_bad_set(self, dirs):
        _, gallery, _ = dirs
        assert main(["build-gallery", "--gallery-dir", str(gallery), "--set", "nonsense"]) == 2
        assert main(["build-gallery", "--gallery-dir", str(gallery), "--set", "no.such.key=1"]) == 2


class TestConfig:
    def test_parse_text(self):
        assert parse_config_text("a = 1 # note\n\n b=two\n") == {"a": "1", "b": "two"}
        with pytest.raises(ConfigError):
            parse_config_text("oops\n")

    def test_typed_values(self, tmp_path):
        config = load_config(None, {"fraction": "1/3", "prompt.n_points": "5", "composite.feather_px": "1.5", "resume": "yes",
                                    "backends.segmenter.model": "/m/sam.pth"})
        assert (config.fraction, config.n_points, config.feather_px, config.resume) == (3, 5, 1.5, True)
        assert config.model_paths == {"segmenter": "/m/sam.pth"}

    def test_defaults(self):
        config = RunConfig(gallery_dir="g")
        assert config.prompt_mode == "box_plus_cam" and config.n_points == 3
        assert config.resolved_ratio_path.name == "cacp-ratios.tsv"
        assert set(config.backends.values()) == {"real"}

    def test_validation(self):
        for key, value in (("prompt.n_points", 17), ("variants_per_image", 0), ("composite.max_overlap_iou", 2), ("prompt.mode", "x")):
            config = RunConfig(source_dir="s", gallery_dir="g", output_dir="o")
            config.set(key, value)
            with pytest.raises(ConfigError):
                config.validate()
