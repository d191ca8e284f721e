from fractions import Fraction

import pytest

from bireal.analysis import analyze, compare, memory_bits
from bireal.model import get_preset


def resnet_oracle(blocks_per_stage):
    """Hand-rolled count for the 224x224 ResNet topology.

    Returns (real params, binary params, real mults, binary mults).
    """
    real_p = 3 * 64 * 49 + 2 * 64 + 512 * 1000 + 1000
    real_m = 64 * 112 * 112 * 3 * 49 + 512 * 1000
    bin_p = bin_m = 0
    cin, hw = 64, 56
    for stage, (width, nblocks) in enumerate(zip((64, 128, 256, 512), blocks_per_stage)):
        for b in range(nblocks):
            stride = 2 if stage > 0 and b == 0 else 1
            out_hw = hw // stride
            for k in range(2):
                c_in = cin if k == 0 else width
                bin_p += width * c_in * 9
                bin_m += width * out_hw * out_hw * c_in * 9
                real_p += 2 * width
            if stride != 1 or cin != width:
                real_p += width * cin + 2 * width
                real_m += width * out_hw * out_hw * cin
            cin, hw = width, out_hw
    return real_p, bin_p, real_m, bin_m


@pytest.mark.parametrize("name,blocks", [("bireal18", (2, 2, 2, 2)), ("bireal34", (3, 4, 6, 3))])
def test_totals_match_oracle(name, blocks):
    rp, bp, rm, bm = resnet_oracle(blocks)
    rep = analyze(get_preset(name))
    assert rep.totals["real_params"] == rp
    assert rep.totals["binary_params"] == bp
    assert rep.memory_bits == 32 * rp + bp
    assert rep.flops == rm + Fraction(bm, 64)
    assert rep.baseline_memory_bits == 32 * (rp + bp)
    assert rep.baseline_flops == rm + bm


@pytest.mark.parametrize(
    "name,mem,fl,save,speed",
    [("bireal18", 33.6e6, 1.63e8, 11.14, 11.06), ("bireal34", 43.7e6, 1.93e8, 15.97, 18.99)],
)
def test_published_costs_within_two_percent(name, mem, fl, save, speed):
    rep = analyze(get_preset(name))
    assert rep.memory_bits == pytest.approx(mem, rel=0.02)
    assert float(rep.flops) == pytest.approx(fl, rel=0.02)
    assert rep.memory_saving_ratio == pytest.approx(save, rel=0.02)
    assert rep.speedup_ratio == pytest.approx(speed, rel=0.02)


def test_variants_share_cost():
    # identity adds are free; only the 1x1 downsample convs differ
    a = get_preset("bireal18")
    r = compare(a, a.with_variant("resnet"))
    assert r["memory_bits"] == 1.0 and r["flops"] == 1.0
    assert compare(a, a.with_variant("plain"))["flops"] > 1.0


def test_records_and_table():
    rep = analyze(get_preset("bireal18"))
    recs = list(rep.records())
    assert recs[-1]["type"] == "total"
    assert sum(r["memory_bits"] for r in recs[:-1]) == rep.memory_bits
    assert "memory saving" in rep.table()
    assert memory_bits(get_preset("toy")).memory_bits > 0


def test_input_size_scales_flops():
    small = analyze(get_preset("bireal18").with_input(112, 112))
    big = analyze(get_preset("bireal18"))
    assert small.memory_bits == big.memory_bits
    assert small.flops < big.flops / 3
