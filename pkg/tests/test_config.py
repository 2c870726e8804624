"""Config text format: parse/render round trips, typed converters, validation
rules, presets, and the FNV-1a digest."""
import dataclasses

import pytest

from hrnet_forge.config import (PRESETS, RunConfig, config_digest, fnv1a64,
                                from_items, load_config, parse_config,
                                render_config)
from hrnet_forge.tensor import ConfigError


def test_render_parse_fixpoint():
    cfg = RunConfig()
    text = render_config(cfg)
    assert parse_config(text) == cfg
    assert render_config(parse_config(text)) == text


def test_render_is_sorted_one_key_per_line():
    lines = render_config(RunConfig()).strip().splitlines()
    keys = [l.split(" = ")[0] for l in lines]
    assert keys == sorted(keys)
    assert all(" = " in l for l in lines)


def test_parse_ignores_comments_and_blanks():
    cfg = parse_config(
        "# full-line comment\n"
        "\n"
        "net.width = 32   # trailing comment\n"
        "   \n"
        "seed = 7\n")
    assert cfg.net_width == 32
    assert cfg.seed == 7


def test_parse_reports_line_numbers():
    with pytest.raises(ConfigError, match="line 3"):
        parse_config("seed = 1\n\nnot a key value line\n")
    with pytest.raises(ConfigError, match="line 2.*duplicate"):
        parse_config("seed = 1\nseed = 2\n")


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config("net.depth = 50\n")


@pytest.mark.parametrize("line,fragment", [
    ("seed = x", "seed"),
    ("opt.lr = fast", "opt.lr"),
    ("opt.nesterov = yes", "opt.nesterov"),
    ("net.input_size = 224", "net.input_size"),
    ("net.stage_blocks = 1,two,3", "net.stage_blocks"),
])
def test_typed_converters_reject_garbage(line, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(line + "\n")


def test_typed_converters_round_trip_values():
    cfg = parse_config(
        "net.input_size = 128x96\n"
        "net.stage_blocks = 2,3,4\n"
        "opt.milestones = 10,20,30\n"
        "opt.nesterov = true\n"
        "aug.crop = 64x48\n"
        "data.dir = /tmp/somewhere\n"
        "data.kind = dir\n"
        "opt.lr = 0.125\n")
    assert cfg.net_input_size == (128, 96)
    assert cfg.net_stage_blocks == (2, 3, 4)
    assert cfg.opt_milestones == (10, 20, 30)
    assert cfg.opt_nesterov is True
    assert cfg.aug_crop == (64, 48)
    assert cfg.data_dir == "/tmp/somewhere"
    assert cfg.opt_lr == 0.125
    again = parse_config(render_config(cfg))
    assert again == cfg


def test_optional_values_render_as_none():
    cfg = RunConfig()
    text = render_config(cfg)
    assert "aug.crop = none" in text
    assert "data.dir = none" in text
    assert parse_config(text).aug_crop is None


@pytest.mark.parametrize("items,fragment", [
    ({"task": "detection"}, "unknown task"),
    ({"net.head": "v3"}, "unknown head"),
    ({"task": "classification", "net.head": "v2"}, "does not produce outputs"),
    ({"task": "segmentation", "net.head": "cls_c"}, "does not produce outputs"),
    ({"precision": "double"}, "verify|fast"),
    ({"opt.schedule": "cosine"}, "opt.schedule"),
    ({"opt.lr": "-0.1"}, "must be positive"),
    ({"opt.iters": "0"}, "must be positive"),
    ({"aug.flip": "1.5"}, "probability"),
    ({"aug.scale_min": "2.0", "aug.scale_max": "1.0"}, "min <= max"),
    ({"data.noise": "-1.0"}, "data.noise"),
    ({"data.kind": "dir"}, "data.dir"),
    ({"net.num_outputs": "5", "data.classes": "2"}, "num_outputs"),
])
def test_validation_rules(items, fragment):
    with pytest.raises(ConfigError, match=fragment):
        from_items(items)


def test_task_head_compatibility_accepts_valid_pairs():
    ok = [("segmentation", "v1"), ("segmentation", "v2"),
          ("landmarks", "v1h"), ("classification", "cls_cii"),
          ("pyramid", "v2p")]
    for task, head in ok:
        items = {"task": task, "net.head": head}
        if task == "classification":
            items["data.classes"] = "19"
        if task == "landmarks":
            items["data.landmarks"] = "19"
        from_items(items)


def test_synthetic_output_count_must_match_data():
    from_items({"task": "landmarks", "net.head": "v2",
                "net.num_outputs": "7", "data.landmarks": "7"})
    with pytest.raises(ConfigError, match="num_outputs"):
        from_items({"task": "landmarks", "net.head": "v2",
                    "net.num_outputs": "7", "data.landmarks": "9"})


# ---------------------------------------------------------------------------
# digest


def test_fnv1a64_reference_vectors():
    # published FNV-1a 64-bit test vectors
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_digest_stable_across_round_trip():
    cfg = load_config("tiny-seg")
    d = config_digest(cfg)
    assert d == config_digest(parse_config(render_config(cfg)))
    assert 0 <= d < 2 ** 64


def test_digest_changes_when_value_changes():
    base = load_config("tiny-seg")
    bumped = dataclasses.replace(base, seed=base.seed + 1)
    assert config_digest(base) != config_digest(bumped)


# ---------------------------------------------------------------------------
# presets / loading


def test_all_presets_validate():
    for name in PRESETS:
        cfg = load_config(name)
        cfg.validate()
        cfg.network().validate()


def test_tiny_presets_are_small():
    for name in ("tiny-seg", "tiny-lmk", "tiny-cls"):
        cfg = load_config(name)
        assert cfg.net_width <= 8
        assert max(cfg.net_input_size) <= 64


def test_load_config_from_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(render_config(load_config("tiny-lmk")))
    assert load_config(str(path)) == load_config("tiny-lmk")


def test_load_config_missing():
    with pytest.raises(ConfigError, match="neither a file nor a preset"):
        load_config("/no/such/file.cfg")
