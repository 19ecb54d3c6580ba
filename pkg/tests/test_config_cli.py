import numpy as np
import pytest

from maskfuse.cli import main
from maskfuse.config import RunConfig, SubjectConfig, parse_config, serialize_config
from maskfuse.errors import ConfigError
from maskfuse.fixtures import two_subject_half_grid
from maskfuse.lora import random_lora_set, save_lora_set, zero_lora_set
from maskfuse.superpixel import SlicParams
from maskfuse.tensorio import SeededRng, save_tensor
from maskfuse.toydit import ToyModelConfig, forward_step


def read_pgm(path):
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n")
    _, dims, maxval, pixels = raw.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    assert int(maxval) == 255
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def kv_lines(captured):
    out = {}
    for line in captured.strip().splitlines():
        for tok in line.split():
            k, _, v = tok.partition("=")
            out[k] = v
    return out


# --- config parsing -----------------------------------------------------------

def test_parse_defaults_from_empty():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert cfg.model.n_steps == 12 and cfg.sink.p == 0.01 and cfg.slic.compactness == 10.0


def test_parse_comments_and_values():
    cfg = parse_config(
        """
        # a comment
        n_steps = 6
        mask_step = 2   # trailing comment
        sink_p = 0.05
        subject.alice.tokens = 1,2
        subject.bob.tokens = 4
        subject.bob.lora = /tmp/bob
        """
    )
    assert cfg.model.n_steps == 6 and cfg.model.mask_step == 2
    assert cfg.sink.p == 0.05
    assert cfg.subjects == (
        SubjectConfig("alice", (1, 2)),
        SubjectConfig("bob", (4,), "/tmp/bob"),
    )


def test_parse_rejects_unknown_and_duplicates():
    with pytest.raises(ConfigError):
        parse_config("frobnicate = 1")
    with pytest.raises(ConfigError):
        parse_config("n_steps = 2\nn_steps = 3")
    with pytest.raises(ConfigError):
        parse_config("subject.a.colour = red")
    with pytest.raises(ConfigError):
        parse_config("subject.a.lora = /x")  # span missing


def test_parse_rejects_invariant_violations():
    with pytest.raises(ConfigError):
        parse_config("mask_step = 12")  # >= n_steps default 12
    with pytest.raises(ConfigError):
        parse_config("n_steps = 0")


def test_serialize_round_trip():
    cfg = RunConfig(
        model=ToyModelConfig(n_blocks=3, n_steps=9, mask_step=1, mask_block=2, n_text=6),
        slic=SlicParams(n_segments=12, compactness=5.0, sigma=0.5, iterations=4),
        seed=77,
        output_dir="results",
        init_latent="lat.tensor",
        subjects=(SubjectConfig("a", (1, 2)), SubjectConfig("b", (3,), "dir/b")),
    )
    assert parse_config(serialize_config(cfg)) == cfg
    # canonical form is a fixed point
    text = serialize_config(cfg)
    assert serialize_config(parse_config(text)) == text


# --- derive-mask -----------------------------------------------------------------

@pytest.fixture()
def engineered_inputs(tmp_path):
    """Tensor files + config for the half-grid fixture, via the CLI surface."""
    fx = two_subject_half_grid(seed=3)
    cap = forward_step(
        fx.model, fx.latent, [(s.lora_set, None) for s in fx.subjects],
        capture=(0,), prompt=fx.prompt,
    )
    tr = cap.traces[0]
    save_tensor(tr.q[0, : fx.model.cfg.n_text], tmp_path / "qtext.tensor")
    save_tensor(tr.k[0, fx.model.cfg.n_text:], tmp_path / "kimg.tensor")
    save_tensor(tr.a_self.weights, tmp_path / "aself.tensor")
    from maskfuse.superpixel import decode_predicted_sample

    x0 = decode_predicted_sample(cap.x0_tokens, 8, 8)
    save_tensor(x0.values, tmp_path / "x0.tensor")
    config = tmp_path / "run.cfg"
    config.write_text(
        "n_blocks = 1\nn_heads = 1\nmask_step = 0\nmask_block = 0\n"
        "n_segments = 16\n"
        "subject.alpha.tokens = 1,2\nsubject.beta.tokens = 5,6\n"
    )
    return fx, tmp_path, config


def test_derive_mask_engineered_halves(engineered_inputs, capsys):
    fx, base, config = engineered_inputs
    rc = main([
        "derive-mask", "--config", str(config),
        "--qtext", str(base / "qtext.tensor"), "--kimg", str(base / "kimg.tensor"),
        "--aself", str(base / "aself.tensor"), "--x0", str(base / "x0.tensor"),
        "--out", str(base / "masks"),
    ])
    assert rc == 0
    alpha = read_pgm(base / "masks" / "mask_alpha.pgm")
    beta = read_pgm(base / "masks" / "mask_beta.pgm")
    assert np.array_equal(alpha, fx.left_mask * 255)
    assert np.array_equal(beta, fx.right_mask * 255)
    assert (base / "masks" / "labeling.tensor").exists()
    vals = kv_lines(capsys.readouterr().out)
    assert vals["subjects"] == "2"


def test_derive_mask_single_subject_all_white(engineered_inputs, capsys):
    fx, base, config = engineered_inputs
    config.write_text(
        "n_blocks = 1\nn_heads = 1\nmask_step = 0\nmask_block = 0\n"
        "n_segments = 16\nsubject.alpha.tokens = 1,2\n"
    )
    rc = main([
        "derive-mask", "--config", str(config),
        "--qtext", str(base / "qtext.tensor"), "--kimg", str(base / "kimg.tensor"),
        "--aself", str(base / "aself.tensor"), "--x0", str(base / "x0.tensor"),
        "--out", str(base / "one"),
    ])
    assert rc == 0
    assert np.all(read_pgm(base / "one" / "mask_alpha.pgm") == 255)


def test_derive_mask_missing_kimg_exits_2(engineered_inputs, capsys):
    fx, base, config = engineered_inputs
    missing = base / "nope.tensor"
    rc = main([
        "derive-mask", "--config", str(config),
        "--qtext", str(base / "qtext.tensor"), "--kimg", str(missing),
        "--aself", str(base / "aself.tensor"), "--x0", str(base / "x0.tensor"),
        "--out", str(base / "masks"),
    ])
    assert rc == 2
    assert "nope.tensor" in capsys.readouterr().err


def test_derive_mask_accepts_precomputed_across(engineered_inputs):
    fx, base, config = engineered_inputs
    cap = forward_step(
        fx.model, fx.latent, [(s.lora_set, None) for s in fx.subjects],
        capture=(0,), prompt=fx.prompt,
    )
    save_tensor(cap.traces[0].a_cross.weights, base / "across.tensor")
    rc = main([
        "derive-mask", "--config", str(config),
        "--across", str(base / "across.tensor"),
        "--aself", str(base / "aself.tensor"), "--x0", str(base / "x0.tensor"),
        "--out", str(base / "masks2"),
    ])
    assert rc == 0
    assert np.array_equal(read_pgm(base / "masks2" / "mask_alpha.pgm"), fx.left_mask * 255)


def test_derive_mask_shape_mismatch_exits_3(engineered_inputs, capsys):
    fx, base, config = engineered_inputs
    config.write_text(  # grid says 16 tokens, tensors carry 64
        "n_blocks = 1\nn_heads = 1\nmask_step = 0\nmask_block = 0\n"
        "grid_h = 4\ngrid_w = 4\nsubject.alpha.tokens = 1,2\n"
    )
    rc = main([
        "derive-mask", "--config", str(config),
        "--qtext", str(base / "qtext.tensor"), "--kimg", str(base / "kimg.tensor"),
        "--aself", str(base / "aself.tensor"), "--x0", str(base / "x0.tensor"),
        "--out", str(base / "masks3"),
    ])
    assert rc == 3


# --- run-toy ------------------------------------------------------------------------

def write_toy_config(path, extra=""):
    path.write_text(
        "n_steps = 8\nmask_step = 2\nmask_block = 1\n"
        "subject.alice.tokens = 1,2\nsubject.bob.tokens = 4,5\n" + extra
    )


def test_run_toy_byte_identical_reruns(tmp_path, capsys):
    config = tmp_path / "toy.cfg"
    write_toy_config(config)
    for out in ("run1", "run2"):
        rc = main(["run-toy", "--config", str(config), "--seed", "42", "--out", str(tmp_path / out)])
        assert rc == 0
    a, b = tmp_path / "run1", tmp_path / "run2"
    names_a = sorted(p.name for p in a.iterdir())
    names_b = sorted(p.name for p in b.iterdir())
    assert names_a == names_b and len(names_a) > 0
    for name in names_a:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    out1, out2 = capsys.readouterr().out.strip().splitlines()
    assert out1 == out2


def test_run_toy_zero_subjects(tmp_path, capsys):
    config = tmp_path / "toy.cfg"
    config.write_text("n_steps = 4\nmask_step = 1\n")
    rc = main(["run-toy", "--config", str(config), "--out", str(tmp_path / "o")])
    assert rc == 0
    vals = kv_lines(capsys.readouterr().out)
    assert vals["subjects"] == "0"
    assert not list((tmp_path / "o").glob("mask_*.pgm"))


def test_run_toy_bad_mask_step_exits_2(tmp_path, capsys):
    config = tmp_path / "toy.cfg"
    config.write_text("n_steps = 4\nmask_step = 4\n")
    rc = main(["run-toy", "--config", str(config), "--out", str(tmp_path / "o")])
    assert rc == 2


# --- diagnose ----------------------------------------------------------------------

def test_diagnose_identical_adapters_cosine_all_white(tmp_path, capsys):
    shared = random_lora_set(SeededRng(5).derive("shared"), "shared", 32, range(4))
    save_lora_set(shared, tmp_path / "shared")
    config = tmp_path / "toy.cfg"
    write_toy_config(
        config,
        extra=(
            f"subject.alice.lora = {tmp_path / 'shared'}\n"
            f"subject.bob.lora = {tmp_path / 'shared'}\n"
        ),
    )
    rc = main(["diagnose", "--config", str(config), "--seed", "3", "--out", str(tmp_path / "d")])
    assert rc == 0
    heat = read_pgm(tmp_path / "d" / "cosine_map.pgm")
    assert np.all(heat == 255)
    vals = kv_lines(capsys.readouterr().out)
    assert float(vals["cosine.min"]) >= 1.0 - 1e-12


def test_diagnose_zeroed_adapter_prints_zero_error(tmp_path, capsys):
    zero = zero_lora_set(random_lora_set(SeededRng(5).derive("z"), "bob", 32, range(4)))
    save_lora_set(zero, tmp_path / "zero")
    config = tmp_path / "toy.cfg"
    write_toy_config(config, extra=f"subject.bob.lora = {tmp_path / 'zero'}\n")
    rc = main(["diagnose", "--config", str(config), "--seed", "3", "--out", str(tmp_path / "d")])
    assert rc == 0
    vals = kv_lines(capsys.readouterr().out)
    assert vals["eqerr.bob"] == "0.0"


def test_diagnose_unknown_subject_exits_2(tmp_path, capsys):
    config = tmp_path / "toy.cfg"
    write_toy_config(config)
    rc = main(["diagnose", "--config", str(config), "--subjects", "alice,nobody",
               "--out", str(tmp_path / "d")])
    assert rc == 2
    assert "nobody" in capsys.readouterr().err


def test_diagnose_locality_sweep_errors_decrease(tmp_path, capsys):
    errors = []
    for i, gap in enumerate((1.2, 2.5, 8.0)):
        fx = two_subject_half_grid(seed=3, self_gap=gap)
        base = tmp_path / f"g{i}"
        base.mkdir()
        save_tensor(fx.latent, base / "latent.tensor")
        save_tensor(fx.prompt, base / "prompt.tensor")
        save_lora_set(fx.subjects[0].lora_set, base / "alpha")
        save_lora_set(fx.subjects[1].lora_set, base / "beta")
        config = base / "run.cfg"
        config.write_text(
            "n_blocks = 1\nn_heads = 1\nmask_step = 0\nmask_block = 0\n"
            "n_segments = 16\nseed = 3\n"  # model seed must match the fixture's
            f"init_latent = {base / 'latent.tensor'}\n"
            f"prompt_embedding = {base / 'prompt.tensor'}\n"
            "subject.alpha.tokens = 1,2\n"
            f"subject.alpha.lora = {base / 'alpha'}\n"
            "subject.beta.tokens = 5,6\n"
            f"subject.beta.lora = {base / 'beta'}\n"
        )
        rc = main(["diagnose", "--config", str(config), "--out", str(base / "d")])
        assert rc == 0
        vals = kv_lines(capsys.readouterr().out)
        errors.append(float(vals["eqerr.alpha"]))
    assert errors[0] > errors[1] > errors[2]


# --- ablate ------------------------------------------------------------------------

def test_ablate_v_only_adapter(tmp_path, capsys):
    v_only = random_lora_set(SeededRng(2).derive("v"), "v", 32, [0], points=("V",))
    save_lora_set(v_only, tmp_path / "vonly")
    config = tmp_path / "toy.cfg"
    config.write_text("n_steps = 4\nmask_step = 1\n")
    rc = main(["ablate", "--config", str(config), "--lora", str(tmp_path / "vonly"),
               "--seed", "9"])
    assert rc == 0
    vals = kv_lines(capsys.readouterr().out)
    assert float(vals["l2.Q"]) == 0.0
    assert float(vals["l2.K"]) == 0.0
    assert float(vals["l2.FF"]) == 0.0
    assert float(vals["l2.V"]) > 0.0


def test_ablate_zero_adapter_all_zero(tmp_path, capsys):
    zero = zero_lora_set(random_lora_set(SeededRng(2).derive("z"), "z", 32, range(4)))
    save_lora_set(zero, tmp_path / "zero")
    rc = main(["ablate", "--lora", str(tmp_path / "zero"), "--seed", "1"])
    assert rc == 0
    vals = kv_lines(capsys.readouterr().out)
    assert all(float(vals[f"l2.{p}"]) == 0.0 for p in ("Q", "K", "V", "FF"))


def test_ablate_empty_toggles_prints_nothing(tmp_path, capsys):
    rc = main(["ablate", "--toggles", "", "--seed", "1"])
    assert rc == 0
    assert capsys.readouterr().out == ""


def test_ablate_unknown_attachment_exits_2(capsys):
    rc = main(["ablate", "--toggles", "Z", "--seed", "1"])
    assert rc == 2
    assert "Z" in capsys.readouterr().err
