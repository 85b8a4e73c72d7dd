import numpy as np
import pytest
import torch
from scipy import stats

from xray2ct.core import Rng
from xray2ct.discriminator import (
    F1_STRIDE,
    CropRecord,
    DAEDiscriminator,
    DiscriminatorConfig,
    RealOnlyViolation,
    apply_crop,
    discriminate,
    make_targets,
    random_half_crop,
)
from xray2ct.phantom import PhantomSpec, make_sample


def batch(size=64, b=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    ct = torch.rand(b, 1, size, size, size, generator=g) * 2 - 1
    f = ct.mean(dim=2)
    lat = ct.mean(dim=4)
    return ct, f, lat


@pytest.fixture(scope="module")
def disc():
    torch.manual_seed(0)
    return DAEDiscriminator(DiscriminatorConfig(base_channels=4, decoder_channels=4))


def test_taps_at_64(disc):
    out = disc(*batch(64), real=True)
    assert out.f1.shape[-3:] == (8, 8, 8)
    assert out.f2.shape[-3:] == (4, 4, 4)
    assert out.score_map.shape == (1, 1, 2, 2, 2)


def test_taps_at_128_reproduce_16_and_8():
    d = DAEDiscriminator(DiscriminatorConfig(base_channels=2, max_channels=4, decoder_channels=2))
    out = d(*batch(128), real=True)
    assert out.f1.shape[-3:] == (16, 16, 16)
    assert out.f2.shape[-3:] == (8, 8, 8)


@pytest.mark.parametrize("size", [32, 64, 96])
def test_score_schedule(size):
    d = DAEDiscriminator(DiscriminatorConfig(base_channels=2, max_channels=4, decoder_channels=2))
    out = d(*batch(size))
    assert out.score_map.shape[-3:] == (size // 32,) * 3


def test_bad_extent_and_mismatch(disc):
    ct, f, lat = batch(64)
    with pytest.raises(ValueError):
        disc(ct[..., :48], f[..., :48], lat)
    with pytest.raises(ValueError, match="frontal"):
        disc(ct, f[..., :32, :32], lat)
    with pytest.raises(ValueError, match="lateral"):
        disc(ct, f, None)


def test_taps_deterministic(disc):
    a = disc(*batch(64))
    b = disc(*batch(64))
    assert torch.equal(a.f1, b.f1) and torch.equal(a.f2, b.f2) and torch.equal(a.score_map, b.score_map)


def test_conditioning_layout(disc):
    ct, f, lat = batch(32)
    x = disc.condition(ct, f, lat)
    assert x.shape == (1, 3, 32, 32, 32)
    assert torch.equal(x[0, 1, 5], f[0, 0])  # frontal repeated along depth
    assert torch.equal(x[0, 2, :, :, 7], lat[0, 0])  # lateral repeated along width


def test_conditioning_matters_after_training():
    torch.manual_seed(1)
    d = DAEDiscriminator(DiscriminatorConfig(base_channels=4, dae=False))
    opt = torch.optim.Adam(d.parameters(), lr=1e-3)
    samples = [make_sample(f"s{i}", PhantomSpec(seed=i)) for i in range(2)]
    ct = torch.stack([torch.as_tensor(s.ct.data) for s in samples])[:, None]
    f = torch.stack([torch.as_tensor(s.xrays.frontal) for s in samples])[:, None]
    lat = torch.stack([torch.as_tensor(s.xrays.lateral) for s in samples])[:, None]
    for _ in range(5):
        opt.zero_grad()
        real = d(ct, f, lat).score_map
        fake = d(torch.flip(ct, [2]), f, lat).score_map
        loss = ((real - 1) ** 2).mean() + (fake**2).mean()
        loss.backward()
        opt.step()
    with torch.no_grad():
        a = d(ct, f, lat).score_map
        b = d(ct, f[[1, 0]], lat[[1, 0]]).score_map  # swap the X-ray conditioning
    assert not torch.allclose(a, b)


def test_half_crop_extent_and_offsets():
    f1 = torch.zeros(1, 2, 16, 16, 16)
    rng = Rng(3)
    for _ in range(50):
        cropped, rec = random_half_crop(f1, rng)
        assert cropped.shape[-3:] == (8, 8, 8)
        assert all(0 <= o <= 8 for o in rec.offsets)


def test_half_crop_reproducible():
    f1 = torch.zeros(1, 1, 8, 8, 8)
    a = [random_half_crop(f1, Rng(9))[1] for _ in range(3)]
    assert a[0] == a[1] == a[2]


def test_half_crop_odd_extent():
    with pytest.raises(ValueError, match="even"):
        random_half_crop(torch.zeros(1, 1, 8, 7, 8), Rng(0))


def test_half_crop_offsets_uniform():
    f1 = torch.zeros(1, 1, 16, 16, 16)
    rng = Rng(2024)
    offs = np.array([random_half_crop(f1, rng)[1].offsets for _ in range(10_000)])
    for axis in range(3):
        counts = np.bincount(offs[:, axis], minlength=9)
        assert len(counts) == 9
        _, p = stats.chisquare(counts)
        assert p > 1e-3


def test_crop_record_validation():
    with pytest.raises(ValueError):
        CropRecord((5, 0, 0), (4, 4, 4), (8, 8, 8))
    with pytest.raises(ValueError, match="crop record"):
        apply_crop(torch.zeros(1, 1, 4, 4, 4), CropRecord((0, 0, 0), (4, 4, 4), (8, 8, 8)))


def test_decoder_shapes_match_targets(disc):
    ct, f, lat = batch(64)
    out = disc(ct, f, lat, real=True)
    _, crop = random_half_crop(out.f1, Rng(1))
    i_part, i_glob = make_targets(ct, crop)
    part, glob = disc.decode_part(out, crop), disc.decode_global(out)
    assert part.shape == i_part.shape == (1, 1, 16, 16, 16)
    assert glob.shape == i_glob.shape == (1, 1, 16, 16, 16)
    assert part.abs().max() <= 1 and glob.abs().max() <= 1


def test_decoders_only_on_real(disc):
    out = disc(*batch(64), real=False)
    with pytest.raises(RealOnlyViolation):
        disc.decode_global(out)
    with pytest.raises(RealOnlyViolation):
        disc.decode_part(out, CropRecord((0, 0, 0), (4, 4, 4), (8, 8, 8)))


def test_decoder_isolation():
    torch.manual_seed(0)
    d = DAEDiscriminator(DiscriminatorConfig(base_channels=4, decoder_channels=4))
    out = d(*batch(64), real=True)
    crop = CropRecord((1, 2, 3), (4, 4, 4), (8, 8, 8))
    before = d.decode_part(out, crop)
    with torch.no_grad():
        for p in d.dec_global.parameters():
            p.add_(torch.randn_like(p))
    assert torch.equal(before, d.decode_part(out, crop))


def test_zero_decoders_constant():
    d = DAEDiscriminator(DiscriminatorConfig(base_channels=4, decoder_channels=4))
    with torch.no_grad():
        for dec in (d.dec_part, d.dec_global):
            for p in dec.parameters():
                p.zero_()
    out = d(*batch(64), real=True)
    for y in (d.decode_global(out), d.decode_part(out, CropRecord((0, 0, 0), (4, 4, 4), (8, 8, 8)))):
        assert torch.all(y == y.flatten()[0])


def test_no_decoders_without_dae():
    d = DAEDiscriminator(DiscriminatorConfig(base_channels=4, dae=False))
    assert d.dec_part is None
    with pytest.raises(RuntimeError):
        d.decode_global(d(*batch(32), real=True))


def brute_force_pool(vol, k):
    d, h, w = (n // k for n in vol.shape)
    out = np.zeros((d, h, w))
    for i in range(d):
        for j in range(h):
            for l in range(w):
                out[i, j, l] = vol[i * k:(i + 1) * k, j * k:(j + 1) * k, l * k:(l + 1) * k].mean()
    return out


def test_targets_full_extent_hook_vs_brute_force():
    ct, _, _ = batch(32, seed=4)
    crop = CropRecord((0, 0, 0), (4, 4, 4), (4, 4, 4))  # offset 0, full extent
    i_part, i_glob = make_targets(ct, crop)
    np.testing.assert_allclose(i_part[0, 0].numpy(), brute_force_pool(ct[0, 0].numpy().astype(float), 2), atol=1e-6)
    np.testing.assert_allclose(i_glob[0, 0].numpy(), brute_force_pool(ct[0, 0].numpy().astype(float), 4), atol=1e-6)


def test_targets_offset_region_vs_brute_force():
    ct, _, _ = batch(64, seed=5)
    crop = CropRecord((1, 3, 4), (4, 4, 4), (8, 8, 8))
    i_part, _ = make_targets(ct, crop)
    v = ct[0, 0].numpy().astype(float)
    s = F1_STRIDE
    region = v[1 * s:5 * s, 3 * s:7 * s, 4 * s:8 * s]
    np.testing.assert_allclose(i_part[0, 0].numpy(), brute_force_pool(region, 2), atol=1e-6)


def test_targets_constant_and_deterministic():
    ct = torch.full((1, 1, 32, 32, 32), 0.37)
    crop = CropRecord((1, 0, 2), (2, 2, 2), (4, 4, 4))
    i_part, i_glob = make_targets(ct, crop)
    assert torch.allclose(i_glob, torch.tensor(0.37)) and torch.allclose(i_part, torch.tensor(0.37))
    a, b = make_targets(ct, crop)[0], make_targets(ct.clone(), crop)[0]
    assert torch.equal(a, b)


def test_stale_crop_rejected():
    with pytest.raises(ValueError, match="stale"):
        make_targets(torch.zeros(1, 1, 64, 64, 64), CropRecord((0, 0, 0), (2, 2, 2), (4, 4, 4)))


def test_discriminate_wrapper():
    s = make_sample("x", PhantomSpec(seed=1))
    d = DAEDiscriminator(DiscriminatorConfig(base_channels=4))
    out = discriminate(d, s.ct, s.xrays)
    assert out.real and out.f1.shape[-3:] == (4, 4, 4)
