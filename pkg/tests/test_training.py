import csv

import numpy as np
import pytest
import torch
from scipy import stats

from maskdiff.checkpoint import load_archive
from maskdiff.codec import CodecConfig, LightVAE
from maskdiff.denoiser import Denoiser, DenoiserConfig
from maskdiff.errors import ConfigError, TrainingFault
from maskdiff.schedule import make_linear_schedule
from maskdiff.synth import SynthConfig, generate_dataset, stack_samples
from maskdiff.training import TrainConfig, cosine_lr, sample_timesteps, train_loop, train_step


class OracleDenoiser(torch.nn.Module):
    """Returns the clean latent it was handed, whatever the input."""

    def __init__(self, target):
        super().__init__()
        self.target = target
        self.cfg = DenoiserConfig(latent_channels=target.shape[1])
        self.w = torch.nn.Parameter(torch.zeros(()))

    def encode_condition(self, image):
        return None

    def forward(self, z_t, t, cond):
        return self.target + 0 * self.w


class NaNDenoiser(OracleDenoiser):
    def forward(self, z_t, t, cond):
        return torch.full_like(z_t, float("nan")) + 0 * self.w


def _small_models(seed=0, edges=True):
    torch.manual_seed(seed)
    codec = LightVAE(CodecConfig(widths=(8, 8, 8))).eval()
    den = Denoiser(DenoiserConfig(latent_channels=8 if edges else 4, base_channels=8, cond_channels=8, time_dim=16))
    return den, codec


def _batch(seed=0):
    g = torch.Generator().manual_seed(seed)
    image = torch.rand(2, 3, 32, 32, generator=g)
    mask = torch.zeros(2, 1, 32, 32)
    mask[:, :, 8:20, 8:20] = 1
    edge = torch.zeros_like(mask)
    edge[:, :, 6:22, 6:22] = 1
    edge[:, :, 10:18, 10:18] = 0
    return image, mask, edge


def test_timesteps_uniform():
    t = sample_timesteps(100_000, 1000, torch.Generator().manual_seed(0))
    assert t.min() == 1 and t.max() == 1000
    counts = np.bincount(t.numpy(), minlength=1001)[1:]
    assert stats.chisquare(counts).pvalue > 1e-3


def test_cosine_lr_endpoints():
    assert cosine_lr(0, 100, 1e-3) == pytest.approx(1e-3)
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4)
    assert cosine_lr(100, 100, 1e-3) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(150, 100, 1e-3) == pytest.approx(0.0, abs=1e-18)


def test_oracle_prediction_gives_zero_loss():
    _, codec = _small_models()
    image, mask, edge = _batch()
    with torch.no_grad():
        target = torch.cat([codec.encode(mask), codec.encode(edge)], 1)
    total, seg, edg = train_step(image, mask, edge, OracleDenoiser(target), codec, make_linear_schedule(),
                                 TrainConfig(prior_rate=0.0))
    assert total.item() == 0.0 and seg.item() == 0.0 and edg.item() == 0.0


@pytest.mark.parametrize("alpha", [0.2, 0.7])
def test_total_is_weighted_sum(alpha):
    den, codec = _small_models()
    total, seg, edg = train_step(*_batch(), den, codec, make_linear_schedule(), TrainConfig(alpha=alpha),
                                 torch.Generator().manual_seed(0))
    assert total.item() == pytest.approx(alpha * seg.item() + (1 - alpha) * edg.item(), rel=1e-6)


def test_edge_ablation_uses_mask_latent_only():
    den, codec = _small_models(edges=False)
    total, seg, edg = train_step(*_batch(), den, codec, make_linear_schedule(),
                                 TrainConfig(edge_supervision=False), torch.Generator().manual_seed(0))
    assert total.item() == seg.item() and edg.item() == 0.0


def test_non_finite_loss_raises():
    _, codec = _small_models()
    with pytest.raises(TrainingFault):
        train_step(*_batch(), NaNDenoiser(torch.zeros(2, 8, 4, 4)), codec, make_linear_schedule(), TrainConfig())


def _data(n=8):
    images, masks = stack_samples(generate_dataset(SynthConfig(count=n, size=32, seed=5)))
    return images, masks


def test_train_loop_freezes_codec_and_writes_outputs(tmp_path):
    images, masks = _data()
    den, codec = _small_models()
    before = {k: v.clone() for k, v in codec.state_dict().items()}
    cfg = TrainConfig(steps=6, batch_size=2, lr=1e-3, log_every=0, ckpt_every=3)
    result = train_loop(images, masks, den, codec, make_linear_schedule(), cfg, out_dir=tmp_path,
                        run_config={"tag": "unit"})
    for k, v in codec.state_dict().items():
        assert torch.equal(v, before[k])
    assert all(not p.requires_grad for p in codec.parameters())
    rows = list(csv.DictReader((tmp_path / "loss.csv").open()))
    assert len(rows) == 6 and set(rows[0]) == {"step", "lr", "loss_total", "loss_seg", "loss_edg"}
    assert (tmp_path / "ckpt_000003.safetensors").is_file()
    states, config = load_archive(result.checkpoint)
    assert config == {"tag": "unit"} and set(states) == {"denoiser", "codec"}
    assert float(rows[0]["lr"]) == pytest.approx(1e-3)


def test_train_loop_is_reproducible():
    images, masks = _data()
    runs = []
    for _ in range(2):
        den, codec = _small_models(seed=1)
        cfg = TrainConfig(steps=4, batch_size=2, lr=1e-3, log_every=0, seed=3)
        runs.append([r["loss_total"] for r in train_loop(images, masks, den, codec, make_linear_schedule(), cfg).history])
    assert runs[0] == runs[1]


def test_epochs_override_steps():
    assert TrainConfig(steps=5, epochs=2, batch_size=4).total_steps(10) == 6
    assert TrainConfig(steps=5).total_steps(10) == 5


@pytest.mark.parametrize("kw", [{"lr": 0.0}, {"batch_size": 0}, {"alpha": 1.0}, {"prior_rate": -0.5}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_direct_objective_sees_zero_latent_at_final_step():
    seen = {}

    class Probe(OracleDenoiser):
        def forward(self, z_t, t, cond):
            seen["z"], seen["t"] = z_t.clone(), t.clone()
            return super().forward(z_t, t, cond)

    _, codec = _small_models()
    image, mask, edge = _batch()
    target = torch.zeros(2, 8, 4, 4)
    train_step(image, mask, edge, Probe(target), codec, make_linear_schedule(), TrainConfig(objective="direct"))
    assert torch.equal(seen["z"], torch.zeros_like(seen["z"]))
    assert seen["t"].tolist() == [1000, 1000]
    with pytest.raises(ConfigError):
        TrainConfig(objective="score")
