import itertools

import numpy as np
import pytest

from app.models import LatentState, MaskSet
from app.services.stitcher import StitchError, StitchInput, object_region, stitch


def latent(values, step=15):
    return LatentState(step=step, frames=np.asarray(values, dtype=np.float32))


class TestStitch:
    def test_all_mask_combinations(self, rng):
        # Every pixel of a 4x4 frame gets one of the 16 combinations of
        # (object-source object, object-source background, background-source object,
        # background-source background) bits.
        combos = np.array(list(itertools.product([False, True], repeat=4))).reshape(4, 4, 4)
        obj_masks = MaskSet(combos[None, :, :, 0], combos[None, :, :, 1])
        bg_masks = MaskSet(combos[None, :, :, 2], combos[None, :, :, 3])
        obj_latent = latent(rng.standard_normal((1, 4, 4, 2)))
        bg_latent = latent(rng.standard_normal((1, 4, 4, 2)))

        result = stitch(StitchInput(obj_latent, obj_masks, bg_latent, bg_masks))

        for y, x in itertools.product(range(4), range(4)):
            own_object, _, stale_object, _ = combos[y, x]
            source = obj_latent if (own_object or stale_object) else bg_latent
            np.testing.assert_array_equal(result.frames[0, y, x], source.frames[0, y, x])
        assert result.step == 15

    def test_region_is_union_of_object_masks(self, rng):
        obj = MaskSet.from_object(rng.random((3, 4, 4)) < 0.3)
        bg = MaskSet.from_object(rng.random((3, 4, 4)) < 0.3)
        data = StitchInput(latent(np.zeros((3, 4, 4, 1))), obj,
                           latent(np.ones((3, 4, 4, 1))), bg)
        region = object_region(data)
        np.testing.assert_array_equal(region, obj.object_masks | bg.object_masks)
        np.testing.assert_array_equal(stitch(data).frames[..., 0] == 0, region)

    def test_self_stitch_is_identity(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            values = latent(rng.standard_normal((2, 4, 4, 3)))
            masks = MaskSet.from_object(rng.random((2, 4, 4)) < 0.5)
            assert stitch(StitchInput(values, masks, values, masks)).equals(values)

    def test_step_mismatch(self):
        masks = MaskSet.empty(1, 2, 2)
        with pytest.raises(StitchError):
            StitchInput(latent(np.zeros((1, 2, 2, 1)), 10), masks,
                        latent(np.zeros((1, 2, 2, 1)), 15), masks)

    def test_shape_mismatch(self):
        with pytest.raises(StitchError):
            StitchInput(latent(np.zeros((1, 2, 2, 1))), MaskSet.empty(1, 2, 2),
                        latent(np.zeros((1, 2, 2, 2))), MaskSet.empty(1, 2, 2))

    def test_mask_mismatch(self):
        with pytest.raises(StitchError):
            StitchInput(latent(np.zeros((1, 2, 2, 1))), MaskSet.empty(1, 2, 3),
                        latent(np.zeros((1, 2, 2, 1))), MaskSet.empty(1, 2, 2))
