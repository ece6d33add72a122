import hashlib
import json
import os

import numpy as np
import pytest

from mutualformer import numeric as nm
from mutualformer.errors import CheckpointFormatError, ConfigError, TrainingDivergedError, UsageError
from mutualformer.params import named_tensors, replace_tensors
from mutualformer.pipeline import checkpoint as ckpt
from mutualformer.pipeline import data as sd
from mutualformer.pipeline import imageio
from mutualformer.pipeline import model as M
from mutualformer.pipeline.train import (TrainConfig, downsample_mask, eval_csv, evaluate, load_model,
                                         train)

TINY = dict(width=16, heads=2, layers=1, enc_channels=(4, 8, 8, 8), dec_channels=4, size=32,
            train_count=6, test_count=3, batch_size=3, window=7)


def _digest(a):
    return hashlib.sha256(np.round(np.asarray(a), 8).tobytes()).hexdigest()[:16]


# ------------------------------------------------------------------ data

def test_synth_dataset_deterministic():
    a = sd.synth_dataset(3, 4, 32)
    b = sd.synth_dataset(3, 4, 32)
    for x, y in zip(a, b):
        assert x.rgb.tobytes() == y.rgb.tobytes() and x.depth.tobytes() == y.depth.tobytes()
        assert x.mask.tobytes() == y.mask.tobytes()
    assert sd.synth_dataset(4, 1, 32)[0].rgb.tobytes() != a[0].rgb.tobytes()


def test_disk_rasterisation_matches_pixel_centres():
    size, r = 64, 11.3
    s = sd.render_sample([sd.Shape("ellipse", 32.0, 32.0, r, r)], size, seed=0)
    count = sum(1 for y in range(size) for x in range(size)
                if (x + 0.5 - 32.0) ** 2 + (y + 0.5 - 32.0) ** 2 <= r * r)
    assert int(s.mask.sum()) == count


def test_shapes_and_ranges():
    for s in sd.synth_dataset(0, 12, 48):
        assert s.rgb.shape == (48, 48, 3) and s.depth.shape == s.mask.shape == (48, 48)
        assert 0 <= s.rgb.min() and s.rgb.max() <= 1 and 0 <= s.depth.min() and s.depth.max() <= 1
        assert s.mask.any() and set(np.unique(s.mask)) <= {0, 1}
        assert np.corrcoef(s.depth.ravel(), s.mask.ravel())[0, 1] > 0


def test_synth_dataset_validation():
    with pytest.raises(ConfigError):
        sd.synth_dataset(0, 1, 16)
    with pytest.raises(ConfigError):
        sd.synth_dataset(0, 0, 64)


def test_triangle_and_rectangle_raster():
    tri = sd.Shape("triangle", 0, 0, 0, 0, vertices=((0.0, 0.0), (8.0, 0.0), (0.0, 8.0)))
    m = tri.rasterize(8)
    assert m[0, 0] and not m[7, 7] and m.sum() == 36
    rect = sd.Shape("rectangle", 4.0, 4.0, 2.0, 1.0)
    assert rect.rasterize(8).sum() == 8


def test_augment_preserves_shapes_and_is_seeded():
    rgb, depth, mask = sd.stack(sd.synth_dataset(0, 3, 32))
    a = sd.augment(np.random.default_rng(1), rgb, depth, mask)
    b = sd.augment(np.random.default_rng(1), rgb, depth, mask)
    assert all(x.shape == y.shape for x, y in zip(a, (rgb, depth, mask)))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    flipped = sd.augment(np.random.default_rng(0), rgb, depth, mask, crop=False)[2]
    assert all(np.array_equal(f, m) or np.array_equal(f, m[:, ::-1]) for f, m in zip(flipped, mask))


# ------------------------------------------------------------------ files

def test_image_round_trip(tmp_path):
    s = sd.synth_dataset(0, 1, 32)[0]
    imageio.write_image(tmp_path / "a.ppm", s.rgb)
    imageio.write_image(tmp_path / "m.pgm", s.mask * 255)
    assert np.array_equal(imageio.read_image(tmp_path / "a.ppm"), imageio.to_bytes(s.rgb))
    assert np.array_equal(imageio.read_image(tmp_path / "m.pgm") // 255, s.mask)
    assert imageio.encode(np.zeros((2, 3)))[:11] == b"P5\n3 2\n255\n"
    with pytest.raises(UsageError):
        imageio.decode(b"P3\n1 1\n255\n0")


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.w": rng.standard_normal((3, 4)), "b": np.array([1e-300, -0.0, np.pi]),
               "scalar": np.array(2.5), "ünï": rng.standard_normal((2, 1, 3))}
    ckpt.save(tmp_path / "x.mfck", tensors, {"k": [1, 2]}, seed=42)
    back = ckpt.load(tmp_path / "x.mfck")
    assert back.config == {"k": [1, 2]} and back.seed == 42 and back.version == 1
    for k, v in tensors.items():
        assert back.tensors[k].tobytes() == np.asarray(v, dtype=np.float64).tobytes()
        assert back.tensors[k].shape == np.shape(v)


def test_checkpoint_layout_and_errors():
    blob = ckpt.encode({"w": np.array([[1.0, 2.0]])})
    assert blob[:4] == b"MFCK" and int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 3          # w + meta.config + meta.seed
    assert blob[12:14] == (1).to_bytes(2, "little") and blob[14:15] == b"w" and blob[15] == 2
    corrupt = bytearray(blob)
    corrupt[20] ^= 1
    with pytest.raises(CheckpointFormatError, match="checksum"):
        ckpt.decode(bytes(corrupt))
    with pytest.raises(CheckpointFormatError):
        ckpt.decode(b"NOPE" + blob[4:])
    with pytest.raises(CheckpointFormatError):
        ckpt.decode(blob[:10])
    import struct
    import zlib
    v2 = bytearray(blob[:-4])
    v2[4:8] = struct.pack("<I", 2)
    with pytest.raises(CheckpointFormatError, match="version"):
        ckpt.decode(bytes(v2) + struct.pack("<I", zlib.crc32(bytes(v2))))


# ------------------------------------------------------------------ model

def test_encoder_zero_input_and_level_shapes():
    cfg = M.ModelConfig()
    p = M.init_model(0, cfg, 64)
    feats = M.encoder_forward(p["encoder"], np.zeros((1, 64, 64, 3)), np.zeros((1, 64, 64, 1)))
    for level, side in zip(M.LEVELS, (32, 16, 8, 4)):
        assert feats.f_r[level].shape[1:3] == (side, side)
        assert not np.any(feats.f_r[level].data) and not np.any(feats.f_d[level].data)
        assert np.all(feats.p_r[level].data == 0.5)


def test_golden_checksums():
    rgb, depth, _ = sd.stack(sd.synth_dataset(0, 2, 64))
    want = {"add": "61e287a873093acc", "cat": "be8a68fb6ba5ff86", "transformer": "6c8210e57562bda2",
            "crossformer": "da9de5d6a8ec3bfc", "crossformer_cda": "2a81c3e356ba5907",
            "mutualformer": "a3d8a1289f393e96"}
    for strategy, digest in want.items():
        cfg = M.ModelConfig(strategy=strategy, width=16, heads=2, layers=1)
        p = M.init_model(7, cfg, 64)
        rng = np.random.default_rng(1)
        heads = {k: nm.Tensor(rng.uniform(-0.1, 0.1, v.shape)) for k, v in named_tensors(p).items()
                 if ".out." in k}
        o = M.forward(replace_tensors(p, heads), cfg, rgb, depth)
        assert _digest(np.concatenate([o.fused[l].data.ravel() for l in M.LEVELS])) == digest, strategy
        if strategy == "add":
            enc = [o.features.f_r[l].data.ravel() for l in M.LEVELS] + \
                  [o.features.p_d[l].data.ravel() for l in M.LEVELS]
            assert _digest(np.concatenate(enc)) == "e72d0c14fec0dc60"
            assert _digest(o.prediction.data) == "e8d42de79eda7554"


def test_add_fusion_with_zero_depth_features():
    cfg = M.ModelConfig(strategy="add")
    rng = np.random.default_rng(2)
    f_r = {l: nm.Tensor(rng.standard_normal((1, 4, 4, 2))) for l in M.LEVELS}
    f_d = {l: nm.Tensor(np.zeros((1, 4, 4, 2))) for l in M.LEVELS}
    fused = M.fuse({}, M.EncoderFeatures(f_r, f_d, {}, {}), cfg)
    assert all(np.array_equal(fused[l].data, f_r[l].data) for l in M.LEVELS)


def test_token_fusions_start_as_add():
    rgb, depth, _ = sd.stack(sd.synth_dataset(0, 1, 32))
    ref = None
    for s in M.FusionStrategy:
        if s is M.FusionStrategy.CAT:
            continue
        cfg = M.ModelConfig(strategy=s.value, width=16, heads=2, layers=1, enc_channels=(4, 8, 8, 8))
        fused = M.forward(M.init_model(0, cfg, 32), cfg, rgb, depth).fused
        flat = np.concatenate([fused[l].data.ravel() for l in M.LEVELS])
        ref = flat if ref is None else ref
        assert np.array_equal(flat, ref), s


def test_mutualformer_fusion_symmetric_on_identical_modalities():
    cfg = M.ModelConfig(width=16, heads=2, layers=1, enc_channels=(4, 8, 8, 8))
    p = M.init_model(0, cfg, 32)
    tf = p["fuse"]["l3"]
    block = tf.mixer[0]
    import dataclasses
    block = dataclasses.replace(block, attn_d=block.attn_r, f_d=block.f_r)
    emb = dataclasses.replace(tf.embed, proj_d=tf.embed.proj_r)
    grid = np.random.default_rng(3).standard_normal((1, 8, 8, 8))
    from mutualformer.block import block_forward, embed
    tr, td = embed(grid, grid, emb, 4)
    out = block_forward(tr, td, block)
    assert np.array_equal(out.h_r.data, out.h_d.data)


def test_decoder_zero_input_is_uniform():
    cfg = M.ModelConfig()
    p = M.init_model(0, cfg, 64)
    fused = {l: nm.Tensor(np.zeros((2, s, s, c))) for (l, s), c in
             zip(M.level_sizes(64).items(), cfg.enc_channels)}
    out = M.decoder_forward(p["decoder"], fused, (64, 64))
    assert out.final.shape == (2, 64, 64) and np.all(out.final.data == 0.5)
    assert len(out.phase_maps) == 2 and set(out.level_maps) == set(M.LEVELS)


def test_strategy_isolation():
    ref = None
    for s in M.FusionStrategy:
        names = {k: v.data for k, v in named_tensors(M.init_model(5, M.ModelConfig(strategy=s.value), 64)).items()
                 if not k.startswith("fuse.")}
        if ref is None:
            ref = names
        assert names.keys() == ref.keys()
        assert all(np.array_equal(names[k], ref[k]) for k in ref)


def test_model_config_validation():
    with pytest.raises(ConfigError):
        M.ModelConfig(strategy="concat")
    with pytest.raises(ConfigError):
        M.ModelConfig(enc_channels=(8, 8))
    with pytest.raises(ConfigError):
        M.init_model(0, M.ModelConfig(), 40)
    with pytest.raises(ConfigError):
        M.init_model(0, M.ModelConfig(patch=3), 64)


def test_attention_trace_shapes():
    cfg = M.ModelConfig(width=16, heads=2, layers=2)
    rgb, depth, _ = sd.stack(sd.synth_dataset(0, 1, 64))
    tr = M.attention_trace(M.init_model(0, cfg, 64), cfg, rgb, depth, 3)
    assert set(tr) == {"S_r", "S_d", "S_r_hat", "S_d_hat", "S_rd", "S_dr"}
    assert tr["S_r"].shape == (16, 16) and np.allclose(tr["S_r"].sum(axis=1), 1, atol=1e-12)
    with pytest.raises(ConfigError):
        M.attention_trace(M.init_model(0, M.ModelConfig(strategy="add"), 64),
                          M.ModelConfig(strategy="add"), rgb, depth, 3)


# ------------------------------------------------------------------ training

def test_train_config_round_trip_and_errors():
    cfg = TrainConfig(**TINY)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"epochz": 3})
    for bad in ({"lam": 0.95}, {"lr": -1.0}, {"window": 4}, {"strategy": "x"}, {"epsilon": 1.0}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    assert TrainConfig(lr=1.0, lr_milestones=(2, 4)).lr_at(3) == pytest.approx(0.1)


def test_downsample_mask():
    m = np.zeros((1, 4, 4))
    m[0, :2, :2] = 1
    m[0, 2, 2] = 1
    assert np.array_equal(downsample_mask(m, 2)[0], [[1, 0], [0, 0]])


def test_zero_learning_rate_keeps_parameters():
    cfg = TrainConfig(**TINY, epochs=1, lr=0.0, seed=1)
    result = train(cfg)
    init = named_tensors(M.init_model(1, cfg.model_config(), cfg.size))
    assert all(result.params[k].data.tobytes() == v.data.tobytes() for k, v in init.items())


def test_resume_matches_uninterrupted(tmp_path):
    cfg = TrainConfig(**TINY, epochs=3, seed=2, flip=True, crop=True)
    full = train(cfg)
    train(cfg.replace(epochs=1), out_dir=str(tmp_path))
    resumed = train(cfg, resume=ckpt.load(tmp_path / "final.mfck"))
    assert all(full.params[k].data.tobytes() == resumed.params[k].data.tobytes() for k in full.params)
    assert full.log == resumed.log and full.best_epoch == resumed.best_epoch
    with pytest.raises(ConfigError):
        train(cfg.replace(lr=0.5), resume=ckpt.load(tmp_path / "final.mfck"))


def test_divergence_reports_batch(tmp_path):
    cfg = TrainConfig(**TINY, epochs=1, lr=1e200)
    with pytest.raises(TrainingDivergedError) as info:
        train(cfg, out_dir=str(tmp_path))
    assert info.value.batch_id == 1 and info.value.epoch == 0
    dump = json.loads((tmp_path / "diverged.json").read_text())
    assert dump["batch"] == 1 and len(dump["samples"]) == 3


def test_evaluate_rows_and_determinism(tmp_path):
    cfg = TrainConfig(**TINY, epochs=1)
    result = train(cfg, out_dir=str(tmp_path))
    samples = sd.synth_dataset(cfg.data_seed, 3, cfg.size, start=6)
    rows = evaluate(result.tree(), cfg, samples)
    assert [r["sample"] for r in rows] == ["6", "7", "8", "mean"]
    first = eval_csv(rows)
    assert first == eval_csv(evaluate(result.tree(), cfg, samples))
    _, tree = load_model(ckpt.load(tmp_path / "final.mfck"))
    assert eval_csv(evaluate(tree, cfg, samples)) == first
    assert first.splitlines()[0] == "sample,s_measure,f_max,e_max,mae"
    with pytest.raises(UsageError):
        evaluate(result.tree(), cfg, [])
    assert set(os.listdir(tmp_path)) == {"final.mfck", "best.mfck", "loss_log.csv"}


@pytest.mark.slow
def test_overfit_single_sample():
    cfg = TrainConfig(train_count=1, test_count=0, batch_size=1, epochs=200, lr=2e-3,
                      lr_milestones=(), width=32, heads=2, layers=1)
    result = train(cfg)
    assert result.log[-1]["train_mae"] < 0.05
    sample = sd.synth_dataset(cfg.data_seed, 1, cfg.size)
    assert evaluate(result.tree(), cfg, sample)[-1]["mae"] < 0.05
