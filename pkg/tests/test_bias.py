import numpy as np
import pytest
from hypothesis import given, strategies as st

from dronefuse.bias import (
    FIXED_LAMBDA_H,
    FIXED_LAMBDA_W,
    BiasConfig,
    SizeCategory,
    categorize,
    compensate,
    compensate_all,
    default_categories,
    load_bias_config,
    validate_categories,
)
from dronefuse.detections import BBox, Detection

# rows of (name, width bounds, height bounds, λ_w, λ_h) that default_categories must reproduce exactly
TABLE = [
    ("ExtraSmall", (0.000, 0.034), (0.000, 0.014), 0.0155, 0.0110),
    ("Small", (0.034, 0.059), (0.014, 0.027), 0.0107, 0.0055),
    ("Medium", (0.059, 0.094), (0.027, 0.044), 0.0071, 0.0020),
    ("Large", (0.094, 0.144), (0.044, 0.072), 0.0044, 0.0014),
    ("ExtraLarge", (0.144, 1.000), (0.072, 1.000), 0.0022, 0.0011),
]


def scan_category(w):
    """Linear scan over the literal table."""
    for i, (name, (lo, hi), _, _, _) in enumerate(TABLE):
        if lo <= w < hi or (i == len(TABLE) - 1 and w == hi):
            return name
    raise AssertionError(w)


class TestTable:
    def test_verbatim(self):
        cats = default_categories()
        assert len(cats) == 5
        assert [(c.name, c.width_ratio, c.height_ratio, c.lambda_w, c.lambda_h) for c in cats] == TABLE

    def test_small_lambda_w(self):
        assert default_categories()[1].lambda_w == 0.0107

    def test_partition(self):
        validate_categories(default_categories())

    def test_fixed_constants(self):
        assert (FIXED_LAMBDA_W, FIXED_LAMBDA_H) == (0.0057, 0.0023)

    def test_gap_rejected(self):
        cats = default_categories()
        cats[2] = SizeCategory("Medium", (0.06, 0.094), (0.027, 0.044), 0.0071, 0.0020)
        with pytest.raises(ValueError, match="contiguous"):
            validate_categories(cats)

    def test_growing_lambda_rejected(self):
        cats = default_categories()
        cats[3] = SizeCategory("Large", (0.094, 0.144), (0.044, 0.072), 0.01, 0.0014)
        with pytest.raises(ValueError):
            validate_categories(cats)


class TestCategorize:
    cats = default_categories()

    def test_small(self):
        assert categorize(BBox(0.5, 0.5, 0.05, 0.02), self.cats).name == "Small"

    def test_lower_boundary(self):
        assert categorize(BBox(0.5, 0.5, 0.034, 0.02), self.cats).name == "Small"

    def test_full_width(self):
        assert categorize(BBox(0.5, 0.5, 1.0, 0.02), self.cats).name == "ExtraLarge"

    def test_random_widths(self, rng):
        for w in rng.uniform(0, 1, 1000):
            assert categorize(BBox(0.5, 0.5, float(w), 0.1), self.cats).name == scan_category(float(w))


class TestCompensate:
    def test_zero_lambda_identity(self):
        b = BBox(0.4, 0.6, 0.2, 0.1)
        assert compensate(b, BiasConfig("fixed", 0.0, 0.0)) == b

    def test_fixed(self):
        out = compensate(BBox(0.5, 0.5, 0.1, 0.05), BiasConfig("fixed"))
        assert abs(out.w - 0.1000285) <= 1e-15
        assert abs(out.h - 0.0500115) <= 1e-15
        assert (out.cx, out.cy) == (0.5, 0.5)

    def test_variable_extra_small(self):
        out = compensate(BBox(0.5, 0.5, 0.02, 0.01), BiasConfig("variable"))
        assert abs(out.w - 0.0200031) <= 1e-15
        assert abs(out.h - (0.01 + 0.0110 * 0.0002)) <= 1e-15

    def test_clipped_at_border(self):
        out = compensate(BBox(0.5, 0.5, 1.0, 1.0), BiasConfig("fixed"))
        assert out == BBox(0.5, 0.5, 1.0, 1.0)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0),
           st.sampled_from(["fixed", "variable"]))
    def test_growth_and_containment(self, cx, cy, w, h, mode):
        b = BBox(cx, cy, w, h)
        out = compensate(b, BiasConfig(mode))
        bx1, by1, bx2, by2 = b.corners()
        ox1, oy1, ox2, oy2 = out.corners()
        assert ox1 <= bx1 and oy1 <= by1 and bx2 <= ox2 and by2 <= oy2
        assert 0.0 <= ox1 and ox2 <= 1.0 and 0.0 <= oy1 and oy2 <= 1.0

    def test_compensate_all(self, rng):
        cfg = BiasConfig()
        assert compensate_all([], cfg) == []
        dets = [Detection(BBox(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.01, 0.3, 2)), float(rng.uniform()), 1)
                for _ in range(50)]
        out = compensate_all(dets, cfg)
        assert [d.bbox for d in out] == [compensate(d.bbox, cfg) for d in dets]
        assert [(d.confidence, d.class_id) for d in out] == [(d.confidence, d.class_id) for d in dets]

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            BiasConfig("adaptive")


class TestConfigFile:
    def test_fixed(self, tmp_path):
        p = tmp_path / "b.cfg"
        p.write_text("# comment\nmode = fixed\nlambda_w = 0.01\nlambda_h=0.02\n")
        cfg = load_bias_config(p)
        assert (cfg.mode, cfg.fixed_lambda_w, cfg.fixed_lambda_h) == ("fixed", 0.01, 0.02)

    def test_custom_table(self, tmp_path):
        p = tmp_path / "b.cfg"
        p.write_text("mode=variable\ncategory=lo,0,0.5,0,0.5,0.02,0.01\ncategory=hi,0.5,1,0.5,1,0.01,0.005\n")
        cfg = load_bias_config(p)
        assert [c.name for c in cfg.categories] == ["lo", "hi"]
        assert cfg.lambdas(BBox(0.5, 0.5, 0.7, 0.1)) == (0.01, 0.005)

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "b.cfg"
        p.write_text("scale=3\n")
        with pytest.raises(ValueError, match="scale"):
            load_bias_config(p)


def test_compensation_never_shrinks_area():
    rng = np.random.default_rng(7)
    cfg = BiasConfig("variable")
    for cx, cy, w, h in rng.uniform(0, 1, (2000, 4)):
        b = BBox(cx, cy, w, h)
        out = compensate(b, cfg)
        assert out.area >= b.area - 1e-15
