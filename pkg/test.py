import contextlib
import io
import json
import math
import tempfile
import shutil
import unittest
import atexit
from pathlib import Path

import numpy as np
import numpy.testing as npt
from hypothesis import given, settings as hyp_settings, strategies as st

from app.config import settings

# Use an isolated workspace so tests never touch the developer's runs.
TEST_ROOT = Path(tempfile.mkdtemp(prefix="dual_domain_wsod_tests_"))
settings.DATABASE_PATH = str(TEST_ROOT / "ledger_test.db")
settings.LOG_FILE = str(TEST_ROOT / "pipeline_test.log")
settings.RUNS_DIR = TEST_ROOT / "runs"
Path(settings.RUNS_DIR).mkdir(parents=True, exist_ok=True)

# Import logger and database modules AFTER settings overrides so they use test paths.
import app.utils.logger as logger_module  # pylint: disable=wrong-import-position
import app.database.operations as operations_module  # pylint: disable=wrong-import-position
from app.database.models import Base  # pylint: disable=wrong-import-position
from app.core.geom import (  # pylint: disable=wrong-import-position
    BoundingBox, decode_offsets, encode_offsets, greedy_match, iou, iou_matrix, nms, nms_indices,
)
from app.datamodel import (  # pylint: disable=wrong-import-position
    Dataset, DatasetItem, Detection, DomainTag, FullAnnotation, WeakAnnotation,
    load_dataset, save_dataset, structurally_equal, weak_from_full,
)
from app.errors import (  # pylint: disable=wrong-import-position
    ConfigError, DatasetParseError, DatasetValidationError, InternalError, InvalidBoxError,
    MissingArtifactError, NoDefinedClassesError, PreconditionError, StaleArtifactError, StyleError,
    UnsortedDetectionsError,
)
from app.toyworld import (  # pylint: disable=wrong-import-position
    DomainConfig, default_source_style, default_target_style, generate_domain, make_intermediate_g1,
    render_scene, shift_style,
)
from app.detector import (  # pylint: disable=wrong-import-position
    AnchorSpec, DetectorBatch, DetectorHyper, FeatureSpec, extract_features, ImageFeatures, anchor_array, detector_loss,
    fit, init_detector, load_detector, pool_boxes, predict, resolve_blocks, save_detector,
)
from app.detector.train import fixed_batch, train_on_batch  # pylint: disable=wrong-import-position
from app.adapt import (  # pylint: disable=wrong-import-position
    Donor, PasteParams, WarmupConfig, WarmupPlan, WarmupStage, augment_pseudo_labeled, build_g2,
    copy_paste_compose, default_plan, pseudo_label, run_warmup,
)
from app.wsod import (  # pylint: disable=wrong-import-position
    WsodHyper, attention_map, casd_iw_loss, casd_lw_loss, compute_targets, consistency_loss,
    generate_proposals, grid_proposals, init_wsod, load_wsod, mlc_loss, oicr_assign, prepare_image,
    refinement_loss, regression_loss, save_wsod, train_wsod, wsddn_forward, wsddn_scores, wsod_infer,
    wsod_loss,
)
from app.wsod.heads import mean_refined_scores  # pylint: disable=wrong-import-position
from app.wsod.model import image_scores  # pylint: disable=wrong-import-position
from app.wsod.train import train_on_image  # pylint: disable=wrong-import-position
from app.eval import (  # pylint: disable=wrong-import-position
    average_precision, evaluate_detections, mean_ap, tide_decompose,
)
from app.cli import AblationConfig, RunConfig, EvalConfig, check_order_trends  # pylint: disable=wrong-import-position
from app.cli.commands import (  # pylint: disable=wrong-import-position
    cmd_ablate_order, cmd_eval, cmd_gen_data, cmd_report, cmd_train_wsod, cmd_warmup,
)
from app.cli.artifacts import require_current  # pylint: disable=wrong-import-position
from app.eval.report import read_csv  # pylint: disable=wrong-import-position
from app.utils.serialization import file_digest  # pylint: disable=wrong-import-position
import main as main_module  # pylint: disable=wrong-import-position

db_ops = operations_module.db_ops


def _cleanup() -> None:
    """Remove the temporary workspace (called on interpreter exit)."""
    try:
        db_ops.engine.dispose()
    except Exception:  # pragma: no cover - best effort cleanup
        pass
    shutil.rmtree(TEST_ROOT, ignore_errors=True)


atexit.register(_cleanup)


def reset_database() -> None:
    """Recreate every table so each test starts with a blank DB."""
    Base.metadata.drop_all(db_ops.engine)
    Base.metadata.create_all(db_ops.engine)


# ---------------------------------------------------------------------------
# Shared fixtures
# ---------------------------------------------------------------------------
TINY_SPEC = FeatureSpec(blocks=("color", "edge"), grid=2, embed_dim=3, hidden_dim=6, attention_grid=3)


def tiny_world_config(**overrides) -> DomainConfig:
    base = dict(num_classes=2, height=32, width=32, num_source=4, num_target_train=4, num_target_eval=3,
                num_backgrounds=2, min_instances=1, max_instances=2, min_size=8.0, max_size=14.0)
    base.update(overrides)
    return DomainConfig(**base)


def tiny_warmup_config(**overrides) -> WarmupConfig:
    hyper = DetectorHyper(steps=2, anchors_per_image=16, images_per_step=1)
    base = dict(pretrain=hyper, finetune=hyper, confidence_floor=0.0)
    base.update(overrides)
    return WarmupConfig(**base)


def random_image(rng: np.random.Generator, height: int = 16, width: int = 16) -> np.ndarray:
    return rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)


def random_boxes(rng: np.random.Generator, count: int, size: int = 16, min_side: int = 4) -> np.ndarray:
    boxes = []
    for _ in range(count):
        w, h = rng.integers(min_side, size // 2 + 1, size=2)
        x, y = rng.integers(0, size - w + 1), rng.integers(0, size - h + 1)
        boxes.append([x, y, x + w, y + h])
    return np.array(boxes, dtype=np.float64)


def numeric_derivative(f, array: np.ndarray, index, h: float = 1e-5) -> float:
    saved = array[index]
    array[index] = saved + h
    plus = f()
    array[index] = saved - h
    minus = f()
    array[index] = saved
    return (plus - minus) / (2 * h)


def assert_gradients_match(case: unittest.TestCase, f, params, grads, rng, per_param: int = 3,
                           tolerance: float = 1e-4):
    for name in sorted(params):
        array = params[name]
        for _ in range(per_param):
            index = tuple(int(rng.integers(0, s)) for s in array.shape)
            numeric = numeric_derivative(f, array, index)
            analytic = float(np.asarray(grads[name])[index])
            scale = max(abs(numeric), abs(analytic))
            case.assertLessEqual(abs(numeric - analytic), tolerance * scale + 1e-7,
                                 f"{name}{index}: analytic {analytic} vs numeric {numeric}")


def det(box, class_id, score) -> Detection:
    return Detection(BoundingBox(*box), class_id, score)


def ann(*pairs) -> FullAnnotation:
    return FullAnnotation.from_pairs((BoundingBox(*box), c) for box, c in pairs)


box_strategy = st.tuples(
    st.floats(0, 50), st.floats(0, 50), st.floats(1, 30), st.floats(1, 30)
).map(lambda t: BoundingBox(t[0], t[1], t[0] + t[2], t[1] + t[3]))


# ---------------------------------------------------------------------------
# Unit tests
# ---------------------------------------------------------------------------
class GeometryTestCase(unittest.TestCase):
    """IoU, NMS, matching and box encoding."""

    def test_iou_examples(self):
        a = BoundingBox(0, 0, 10, 10)
        self.assertEqual(iou(a, a), 1.0)
        self.assertEqual(iou(a, BoundingBox(20, 20, 30, 30)), 0.0)
        self.assertAlmostEqual(iou(a, BoundingBox(5, 0, 15, 10)), 50.0 / 150.0)
        # touching edges share no area
        self.assertEqual(iou(a, BoundingBox(10, 0, 20, 10)), 0.0)

    def test_invalid_boxes_rejected(self):
        with self.assertRaises(InvalidBoxError):
            BoundingBox(5, 0, 5, 10)
        with self.assertRaises(InvalidBoxError):
            BoundingBox(0, 0, float("nan"), 1)

    @hyp_settings(max_examples=1000, deadline=None)
    @given(box_strategy, box_strategy)
    def test_iou_symmetric_and_bounded(self, a, b):
        value = iou(a, b)
        self.assertGreaterEqual(value, 0.0)
        self.assertLessEqual(value, 1.0)
        self.assertEqual(value, iou(b, a))
        npt.assert_allclose(iou_matrix(a.as_array(), b.as_array())[0, 0], value, atol=1e-12)

    @hyp_settings(max_examples=1000, deadline=None)
    @given(st.lists(st.tuples(box_strategy, st.floats(0, 1)), max_size=12), st.floats(0.1, 0.9))
    def test_nms_keeps_no_overlapping_pair(self, items, threshold):
        dets = [Detection(b, 1, s) for b, s in items]
        kept = nms(dets, threshold)
        scores = [d.score for d in kept]
        self.assertEqual(scores, sorted(scores, reverse=True))
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                self.assertLessEqual(iou(kept[i].box, kept[j].box), threshold)

    def test_nms_tie_goes_to_lower_index(self):
        boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=float)
        self.assertEqual(nms_indices(boxes, np.array([0.5, 0.5]), 0.5), [0])

    def test_greedy_match_requires_sorted_detections(self):
        dets = [det((0, 0, 10, 10), 1, 0.2), det((0, 0, 10, 10), 1, 0.9)]
        with self.assertRaises(UnsortedDetectionsError):
            greedy_match(dets, ann(((0, 0, 10, 10), 1)), 0.5)

    def test_greedy_match_each_gt_once(self):
        dets = [det((0, 0, 10, 10), 1, 0.9), det((0, 0, 10, 10), 1, 0.8), det((0, 0, 10, 10), 2, 0.7)]
        matching = greedy_match(dets, ann(((0, 0, 10, 10), 1)), 0.5)
        self.assertEqual(matching.pairs, ((0, 0),))
        self.assertEqual(matching.unmatched_dets, (1, 2))
        agnostic = greedy_match(dets[2:], ann(((0, 0, 10, 10), 1)), 0.5, class_aware=False)
        self.assertEqual(agnostic.pairs, ((0, 0),))

    def test_offsets_invert(self):
        proposals = np.array([[0, 0, 10, 20], [5, 5, 9, 7]], dtype=float)
        targets = np.array([[2, 1, 14, 18], [4, 5, 10, 8]], dtype=float)
        npt.assert_allclose(decode_offsets(proposals, encode_offsets(proposals, targets)), targets, atol=1e-9)


class DatamodelTestCase(unittest.TestCase):
    """Annotations, dataset validation and the on-disk format."""

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp(dir=TEST_ROOT))

    def test_weak_from_full(self):
        weak = weak_from_full(ann(((0, 0, 4, 4), 2), ((5, 5, 9, 9), 2)), 3)
        self.assertEqual(weak.present, (0, 1, 0))
        self.assertEqual(weak.present_classes(), [2])
        with self.assertRaises(PreconditionError):
            weak_from_full(ann(((0, 0, 4, 4), 4)), 3)

    def test_detection_score_must_be_probability(self):
        with self.assertRaises(PreconditionError):
            det((0, 0, 1, 1), 1, 1.5)

    def test_dataset_rejects_boxes_outside_image(self):
        image = np.zeros((8, 8, 3), dtype=np.uint8)
        with self.assertRaises(DatasetValidationError):
            Dataset(DomainTag.S, ("a",), 8, 8, (DatasetItem("x", image, full=ann(((0, 0, 9, 4), 1))),))

    def test_target_items_carry_only_weak_labels(self):
        image = np.zeros((8, 8, 3), dtype=np.uint8)
        item = DatasetItem("x", image, full=ann(((0, 0, 4, 4), 1)), weak=WeakAnnotation((1,)))
        with self.assertRaises(DatasetValidationError):
            Dataset(DomainTag.T, ("a",), 8, 8, (item,))

    def test_save_and_load_preserve_dataset(self):
        world = generate_domain(tiny_world_config(num_source=2, num_target_train=2, num_target_eval=1,
                                                  num_backgrounds=1), seed=3)
        for ds in world.all():
            path = self.tmp / ds.domain_tag.value
            save_dataset(ds, path)
            self.assertTrue(structurally_equal(ds, load_dataset(path)))

    def test_bad_record_reports_line_number(self):
        world = generate_domain(tiny_world_config(num_source=2), seed=0)
        path = self.tmp / "broken"
        save_dataset(world.source, path)
        lines = (path / "annotations.jsonl").read_text().splitlines()
        lines[2] = lines[2].replace('"file"', '"fiel"')
        (path / "annotations.jsonl").write_text("\n".join(lines) + "\n")
        with self.assertRaises(DatasetParseError) as ctx:
            load_dataset(path)
        self.assertEqual(ctx.exception.line, 3)

    def test_non_binary_weak_label_reports_line_number(self):
        world = generate_domain(tiny_world_config(num_target_train=2), seed=0)
        path = self.tmp / "weak"
        save_dataset(world.target_train, path)
        lines = (path / "annotations.jsonl").read_text().splitlines()
        record = json.loads(lines[2])
        record["weak"] = [2] * len(record["weak"])
        lines[2] = json.dumps(record)
        (path / "annotations.jsonl").write_text("\n".join(lines) + "\n")
        with self.assertRaises(DatasetParseError) as ctx:
            load_dataset(path)
        self.assertEqual(ctx.exception.line, 3)


class ToyWorldTestCase(unittest.TestCase):
    """Styles, rendering and domain generation."""

    def test_shift_style_endpoints(self):
        s, t = default_source_style(2), default_target_style(2)
        self.assertIs(shift_style(s, t, 0.0), s)
        self.assertIs(shift_style(s, t, 1.0), t)
        mid = shift_style(s, t, 0.5)
        self.assertAlmostEqual(mid.texture_noise, 0.5 * (s.texture_noise + t.texture_noise))
        with self.assertRaises(StyleError):
            shift_style(s, t, 1.5)

    def test_generation_is_deterministic(self):
        a = generate_domain(tiny_world_config(), seed=11)
        b = generate_domain(tiny_world_config(), seed=11)
        for x, y in zip(a.all(), b.all()):
            self.assertTrue(structurally_equal(x, y))
        c = generate_domain(tiny_world_config(), seed=12)
        self.assertFalse(structurally_equal(a.source, c.source))

    def test_world_splits(self):
        world = generate_domain(tiny_world_config(), seed=1)
        self.assertTrue(all(item.full is not None for item in world.source.items))
        for item in world.target_train.items:
            self.assertIsNone(item.full)
            self.assertEqual(item.weak, weak_from_full(item.hidden, 2))
        self.assertTrue(all(len(item.scene.placements) == 0 for item in world.backgrounds.items))

    def test_class_frequencies_follow_mixture(self):
        mixture = (0.5, 0.3, 0.2)
        config = tiny_world_config(num_classes=3, height=24, width=24, num_source=400, num_target_train=1,
                                   num_target_eval=1, num_backgrounds=1, max_instances=1, min_size=6.0,
                                   max_size=8.0, class_mixture=list(mixture))
        world = generate_domain(config, seed=9)
        classes = np.concatenate([item.full.classes() for item in world.source.items])
        self.assertEqual(classes.size, 400)
        counts = np.bincount(classes, minlength=4)[1:]
        for count, p in zip(counts, mixture):
            # four binomial standard deviations
            self.assertLessEqual(abs(count - 400 * p), 4 * math.sqrt(400 * p * (1 - p)))

    def test_intermediate_domain_transfers_labels(self):
        world = generate_domain(tiny_world_config(), seed=4)
        target_style = default_target_style(2)
        same = make_intermediate_g1(world.source, target_style, alpha=0.0)
        for x, y in zip(world.source.items, same.items):
            npt.assert_array_equal(x.image, y.image)
        g1 = make_intermediate_g1(world.source, target_style, alpha=0.7)
        self.assertEqual(g1.domain_tag, DomainTag.G1)
        for x, y in zip(world.source.items, g1.items):
            self.assertEqual(x.full, y.full)

    def test_render_is_deterministic_in_seed(self):
        world = generate_domain(tiny_world_config(num_source=1), seed=5)
        spec = world.source.items[0].scene
        style = default_source_style(2)
        a, annotation = render_scene(spec, style, 9, 32, 32)
        b, _ = render_scene(spec, style, 9, 32, 32)
        npt.assert_array_equal(a, b)
        self.assertEqual(annotation, spec.annotation())


class DetectorTestCase(unittest.TestCase):
    """Anchors, pooled features, the detector loss and prediction."""

    def test_anchor_grid_reaches_min_count(self):
        anchors = anchor_array(AnchorSpec(), 32, 32)
        self.assertGreaterEqual(anchors.shape[0], 300)
        self.assertTrue(np.all(anchors[:, :2] >= 0))
        self.assertTrue(np.all(anchors[:, 2] <= 32) and np.all(anchors[:, 3] <= 32))

    def test_pooling_constant_image(self):
        image = np.full((16, 16, 3), 51, dtype=np.uint8)
        features = ImageFeatures(image, resolve_blocks(("color", "edge")))
        color, edge = features.pool(np.array([[1.0, 2.0, 9.0, 13.0]]), 3)
        npt.assert_allclose(color, 0.2, atol=1e-12)
        npt.assert_allclose(edge, 0.0, atol=1e-12)

    @hyp_settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 8), st.integers(1, 8), st.integers(0, 8),
           st.integers(0, 8), st.integers(4, 12), st.integers(4, 12))
    def test_pooling_is_translation_equivariant(self, seed, x, y, dx, dy, w, h):
        # even positions and offsets keep the stride-2 block aligned
        x, y, dx, dy = 2 * x, 2 * y, 2 * dx, 2 * dy
        rng = np.random.default_rng(seed)
        patch = random_image(rng, h, w)
        blocks = resolve_blocks(("color", "edge", "coarse"))
        pooled = []
        for ox, oy in ((x, y), (x + dx, y + dy)):
            image = np.full((48, 48, 3), 90, dtype=np.uint8)
            image[oy:oy + h, ox:ox + w] = patch
            pooled.append(extract_features(blocks, image, BoundingBox(ox, oy, ox + w, oy + h)))
        npt.assert_allclose(pooled[0], pooled[1], atol=1e-12)

    def test_single_block_pathway_rejected(self):
        with self.assertRaises(PreconditionError):
            resolve_blocks(("color",))

    def test_detector_loss_gradient(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            model = init_detector(2, seed=trial, feature_spec=TINY_SPEC)
            model.params["reg_w"] = rng.normal(0, 0.1, size=model.params["reg_w"].shape)
            image = random_image(rng)
            anchors = random_boxes(rng, 6)
            labels = rng.integers(0, 3, size=6)
            positive = labels < 2
            gts = random_boxes(rng, 6)
            pooled = pool_boxes(ImageFeatures(image, TINY_SPEC.resolved_blocks()), anchors, TINY_SPEC.grid)
            batch = DetectorBatch.build(pooled, labels, anchors, gts, positive)
            _, grads = detector_loss(model.params, batch)
            assert_gradients_match(self, lambda: detector_loss(model.params, batch)[0], model.params, grads, rng)

    def test_loss_decreases_on_fixed_batch(self):
        world = generate_domain(tiny_world_config(), seed=2)
        hyper = DetectorHyper(anchors_per_image=32)
        model = init_detector(2, seed=0, feature_spec=TINY_SPEC)
        batch = fixed_batch(model, world.source, hyper)
        _, losses = train_on_batch(model, batch, hyper, steps=20, lr=0.05)
        self.assertLess(losses[-1], losses[0])

    def test_fit_and_predict(self):
        world = generate_domain(tiny_world_config(), seed=2)
        model = fit(None, world.source, DetectorHyper(steps=3, anchors_per_image=16), seed=1)
        self.assertEqual(model.steps, 3)
        grouped = predict(model, world.target_eval.items[0].image)
        for class_id, dets in grouped.items():
            scores = [d.score for d in dets]
            self.assertEqual(scores, sorted(scores, reverse=True))
            self.assertTrue(all(d.class_id == class_id for d in dets))

    def test_query_mode_returns_fixed_budget(self):
        model = init_detector(2, seed=0, mode="query", num_queries=7)
        grouped = predict(model, random_image(np.random.default_rng(1), 32, 32))
        self.assertLessEqual(sum(len(v) for v in grouped.values()), 7)

    def test_checkpoint_is_exact(self):
        model = init_detector(3, seed=5, feature_spec=TINY_SPEC)
        model.stage, model.final_lr = 2, 0.008
        path = TEST_ROOT / "detector.json"
        save_detector(model, path)
        loaded = load_detector(path)
        self.assertEqual(loaded.stage, 2)
        for name, value in model.params.items():
            npt.assert_array_equal(loaded.params[name], value)
        save_detector(loaded, TEST_ROOT / "detector_again.json")
        self.assertEqual(file_digest(path), file_digest(TEST_ROOT / "detector_again.json"))


class AdaptTestCase(unittest.TestCase):
    """Copy-paste, pseudo-labels, plans and the warm-up graph."""

    @hyp_settings(max_examples=1000, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(0, 3), st.integers(1, 6))
    def test_copy_paste_no_overlap_and_ratio(self, seed, existing_count, donor_count):
        rng = np.random.default_rng(seed)
        canvas = random_image(rng, 48, 48)
        existing = ann(*[((x, x, x + 6, x + 6), 1) for x in range(0, 12 * existing_count, 12)])
        donors = [Donor(random_image(rng, int(rng.integers(3, 12)), int(rng.integers(3, 12))), 2)
                  for _ in range(donor_count)]
        params = PasteParams()
        result = copy_paste_compose(donors, canvas, existing, params, rng)
        self.assertEqual(result.pasted + result.skipped, donor_count)
        boxes = result.annotation.boxes()
        overlaps = iou_matrix(boxes, boxes)
        np.fill_diagonal(overlaps, 0.0)
        self.assertEqual(float(overlaps.max(initial=0.0)), 0.0)
        pasted = result.annotation.instances[len(existing):]
        donor_sizes = [(d.patch.shape[1], d.patch.shape[0]) for d in donors]
        for inst in pasted:
            self.assertTrue(any(
                math.ceil(w * 0.8 - 1e-9) <= inst.box.width <= math.floor(w * 1.2 + 1e-9)
                and math.ceil(h * 0.8 - 1e-9) <= inst.box.height <= math.floor(h * 1.2 + 1e-9)
                for w, h in donor_sizes))

    @hyp_settings(max_examples=300, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(0, 3),
           st.lists(st.tuples(st.integers(4, 10), st.integers(1, 2)), min_size=1, max_size=3))
    def test_augment_pseudo_labeled_keeps_originals(self, seed, max_count, specs):
        rng = np.random.default_rng(seed)
        image = random_image(rng, 48, 48)
        pl = ann(*[((16 * k, 0, 16 * k + side, side), c) for k, (side, c) in enumerate(specs)])
        params = PasteParams(max_paste_count=max_count)
        out_image, out_ann = augment_pseudo_labeled(image, pl, params, np.random.default_rng(seed))
        if max_count == 0:
            npt.assert_array_equal(out_image, image)
            self.assertEqual(out_ann, pl)
            return
        self.assertEqual(out_ann.instances[:len(pl)], pl.instances)
        for inst in pl.instances:
            x0, y0, x1, y1 = (int(v) for v in inst.box.as_tuple())
            npt.assert_array_equal(out_image[y0:y1, x0:x1], image[y0:y1, x0:x1])
        for class_id in (1, 2):
            originals = sum(1 for inst in pl.instances if inst.class_id == class_id)
            extra = sum(1 for inst in out_ann.instances[len(pl):] if inst.class_id == class_id)
            self.assertLessEqual(extra, max_count * originals)

    def test_g2_needs_backgrounds(self):
        world = generate_domain(tiny_world_config(), seed=0)
        with self.assertRaises(PreconditionError):
            build_g2(world.source, [], PasteParams(), seed=0)
        g2 = build_g2(world.source, [item.image for item in world.backgrounds.items], PasteParams(), seed=0)
        self.assertEqual(g2.domain_tag, DomainTag.G2)
        self.assertEqual(len(g2), len(world.source))

    @hyp_settings(max_examples=1000, deadline=None)
    @given(st.lists(st.integers(0, 1), min_size=3, max_size=3),
           st.lists(st.tuples(st.integers(1, 3), st.floats(0, 1)), max_size=10))
    def test_pseudo_labels_are_sound(self, present, raw):
        weak = WeakAnnotation(tuple(present))
        grouped = {c: [] for c in (1, 2, 3)}
        for k, (class_id, score) in enumerate(raw):
            grouped[class_id].append(det((k, k, k + 5, k + 5), class_id, score))
        for dets in grouped.values():
            dets.sort(key=lambda d: -d.score)
        labels = pseudo_label(grouped, weak, 0.5)
        classes = list(labels.classes())
        self.assertEqual(len(classes), len(set(classes)))
        self.assertTrue(all(weak.is_present(int(c)) for c in classes))

    def test_plan_validation(self):
        self.assertEqual(WarmupPlan().stages, default_plan())
        self.assertEqual(len(default_plan(pl_rounds=3)), 6)
        with self.assertRaises(ValueError):
            WarmupPlan(stages=[WarmupStage.FT_G1])
        with self.assertRaises(ValueError):
            WarmupPlan(stages=[WarmupStage.PRETRAIN_S, WarmupStage.FT_PLT_AUG], pl_rounds=1)
        with self.assertRaises(ValueError):
            WarmupPlan(stages=default_plan(), pl_rounds=3)
        self.assertEqual(WarmupPlan.named("S-G2-G1-PLT-AUG").stages[1], WarmupStage.FT_G2)
        self.assertNotIn(WarmupStage.FT_G2, WarmupConfig.voc_like().plan.stages)

    def test_default_warmup_emits_five_checkpoints(self):
        world = generate_domain(tiny_world_config(), seed=0)
        config = tiny_warmup_config()
        checkpoints = run_warmup(config.plan, world.source, world.target_train,
                                 [item.image for item in world.backgrounds.items], seed=0, config=config)
        self.assertEqual([tag for tag, _ in checkpoints], [f"FSOD-{k}" for k in range(1, 6)])
        self.assertEqual([m.stage for _, m in checkpoints], [1, 2, 3, 4, 5])


class WsodHeadsTestCase(unittest.TestCase):
    """MIL core, refinement assignment and per-head losses."""

    @hyp_settings(max_examples=1000, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
    def test_stream_stochasticity(self, num_classes, proposals, seed):
        rng = np.random.default_rng(seed)
        x_cls = rng.normal(0, 3, size=(num_classes, proposals))
        x_det = rng.normal(0, 3, size=(num_classes, proposals))
        cls_soft, det_soft, x0, p = wsddn_scores(x_cls, x_det)
        npt.assert_allclose(cls_soft.sum(axis=0), 1.0, atol=1e-12)
        npt.assert_allclose(det_soft.sum(axis=1), 1.0, atol=1e-12)
        self.assertTrue(np.all((p >= 0) & (p <= 1 + 1e-12)))
        npt.assert_array_equal(p, x0.sum(axis=1))

    def test_two_by_two_image_scores(self):
        e = math.e
        x_cls = np.array([[1.0, 0.0], [0.0, 1.0]])
        x_det = np.array([[0.0, 0.0], [1.0, 0.0]])
        _, _, _, p = wsddn_scores(x_cls, x_det)
        self.assertAlmostEqual(p[0], 0.5, places=12)
        self.assertAlmostEqual(p[1], 2 * e / (e + 1) ** 2, places=12)

    def test_single_proposal_forward(self):
        model = init_wsod(3, WsodHyper(num_refinements=2), seed=0, feature_spec=TINY_SPEC)
        V = np.random.default_rng(0).normal(size=(TINY_SPEC.input_dim, 1))
        scores = wsddn_forward(V, model)
        npt.assert_allclose(scores.p, scores.cls_soft[:, 0], atol=1e-12)
        for ref in scores.x_ref:
            npt.assert_allclose(ref.sum(axis=0), 1.0, atol=1e-12)
        with self.assertRaises(PreconditionError):
            wsddn_forward(np.full((TINY_SPEC.input_dim, 1), np.nan), model)

    def test_mlc_loss(self):
        weak = WeakAnnotation((1, 0, 1))
        loss, _ = mlc_loss(np.array([1.0, 0.0, 1.0]), weak)
        self.assertAlmostEqual(loss, 0.0, places=6)
        loss, _ = mlc_loss(np.zeros(3), WeakAnnotation((0, 0, 0)))
        self.assertAlmostEqual(loss, 0.0, places=6)
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = rng.uniform(0.05, 0.95, size=3)
            _, grad = mlc_loss(p, weak)
            for c in range(3):
                numeric = numeric_derivative(lambda: mlc_loss(p, weak)[0], p, c, h=1e-6)
                self.assertLess(abs(numeric - grad[c]), 1e-6 * max(1.0, abs(grad[c])))

    def test_oicr_assignment_fixture(self):
        boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 6], [0, 0, 10, 1]], dtype=float)
        scores = np.array([[0.9, 0.5, 0.2], [0.1, 0.1, 0.1]])
        assignment = oicr_assign(scores, boxes, WeakAnnotation((1, 0)))
        npt.assert_array_equal(assignment.labels, [1, 1, 3])
        npt.assert_allclose(assignment.weights, 0.9)
        single = oicr_assign(np.array([[0.4]]), boxes[:1], WeakAnnotation((1,)))
        npt.assert_array_equal(single.labels, [1])
        npt.assert_allclose(single.weights, [0.4])

    @hyp_settings(max_examples=1000, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 8), st.lists(st.integers(0, 1), min_size=3, max_size=3))
    def test_oicr_partitions_proposals(self, seed, count, present):
        rng = np.random.default_rng(seed)
        boxes = random_boxes(rng, count, size=32)
        weak = WeakAnnotation(tuple(present))
        assignment = oicr_assign(rng.uniform(size=(3, count)), boxes, weak)
        self.assertEqual(assignment.labels.shape, (count,))
        self.assertTrue(np.all((assignment.labels >= 1) & (assignment.labels <= 4)))
        self.assertTrue(all(weak.is_present(int(c)) for c in assignment.labels if c <= 3))
        for class_id, j, _ in assignment.seeds:
            self.assertEqual(assignment.labels[j], class_id)

    def test_refinement_loss(self):
        labels = np.array([1, 3])
        weights = np.ones(2)
        perfect = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
        self.assertAlmostEqual(refinement_loss(perfect, labels, weights)[0], 0.0)
        uniform = np.full((3, 2), 1.0 / 3.0)
        self.assertAlmostEqual(refinement_loss(uniform, labels, weights)[0], math.log(3))
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = rng.uniform(0.05, 1.0, size=(3, 4))
            labels = rng.integers(1, 4, size=4)
            weights = rng.uniform(0.1, 1.0, size=4)
            _, grad = refinement_loss(x, labels, weights)
            assert_gradients_match(self, lambda: refinement_loss(x, labels, weights)[0], {"x": x}, {"x": grad},
                                   rng, per_param=6)

    def test_regression_loss(self):
        boxes = np.array([[0, 0, 10, 10], [20, 20, 30, 30]], dtype=float)
        seed_boxes = boxes.copy()
        zero = np.zeros((4, 2))
        self.assertEqual(regression_loss(zero, np.array([1, 1]), seed_boxes, boxes, 1)[0], 0.0)
        self.assertEqual(regression_loss(zero, np.array([2, 2]), seed_boxes, boxes, 1)[0], 0.0)
        rng = np.random.default_rng(3)
        for _ in range(20):
            reg = rng.normal(0, 1, size=(4, 2))
            seeds = boxes + rng.uniform(-2, 2, size=boxes.shape)
            labels = np.array([1, int(rng.integers(1, 3))])
            _, grad = regression_loss(reg, labels, seeds, boxes, 1)
            assert_gradients_match(self, lambda: regression_loss(reg, labels, seeds, boxes, 1)[0],
                                   {"reg": reg}, {"reg": grad}, rng, per_param=6)

    def test_mean_refined_scores_single_head(self):
        model = init_wsod(2, WsodHyper(num_refinements=1), seed=0, feature_spec=TINY_SPEC)
        V = np.random.default_rng(0).normal(size=(TINY_SPEC.input_dim, 4))
        scores = wsddn_forward(V, model)
        npt.assert_allclose(mean_refined_scores(scores, 2), scores.x_ref[0][:2])


class CasdTestCase(unittest.TestCase):
    """Attention maps and consistency losses."""

    def test_attention_map_examples(self):
        npt.assert_allclose(attention_map(np.zeros((2, 4, 3))), 0.5)
        npt.assert_allclose(attention_map(np.full((1, 4, 3), 2.0)), 1.0 / (1.0 + math.exp(-2.0)))
        base = np.random.default_rng(0).normal(size=(1, 4, 3))
        raised = base.copy()
        raised[..., 1] += 0.5
        self.assertTrue(np.all(attention_map(raised) >= attention_map(base)))

    def test_consistency_loss_examples(self):
        member = np.array([[[0.2, 0.4, 0.6, 0.8]]])
        self.assertEqual(consistency_loss(member)[0], 0.0)
        self.assertEqual(consistency_loss(np.concatenate([member, member]))[0], 0.0)
        pair = np.array([[[0.2, 0.4, 0.6, 0.8]], [[0.5, 0.1, 0.6, 0.9]]])
        loss, _, aggregate = consistency_loss(pair)
        self.assertAlmostEqual(loss, 0.0475, places=12)
        self.assertTrue(np.all(aggregate[None] >= pair))

    def test_iw_and_lw_losses(self):
        rng = np.random.default_rng(4)
        model = init_wsod(2, WsodHyper(), seed=0, feature_spec=TINY_SPEC)
        image = random_image(rng)
        boxes = random_boxes(rng, 3)
        loss_iw, grads_iw, aggregate = casd_iw_loss(image, boxes, model.params, TINY_SPEC)
        self.assertGreaterEqual(loss_iw, 0.0)
        self.assertTrue(np.all((aggregate > 0) & (aggregate < 1)))
        self.assertIn("embed_w1", grads_iw)
        loss_lw, grads_lw, _ = casd_lw_loss(image, boxes, model.params, TINY_SPEC)
        self.assertGreaterEqual(loss_lw, 0.0)
        self.assertIn("embed_w0", grads_lw)


class WsodTrainingTestCase(unittest.TestCase):
    """Total-loss gradients, proposals, training and inference."""

    def _instance(self, rng, variant, num_classes=2, count=3):
        hyper = WsodHyper(variant=variant, num_refinements=2)
        model = init_wsod(num_classes, hyper, seed=int(rng.integers(1000)), feature_spec=TINY_SPEC)
        for name in model.params:
            if name.startswith("reg"):
                model.params[name] = rng.normal(0, 0.1, size=model.params[name].shape)
        image = random_image(rng)
        item = prepare_image(image, random_boxes(rng, count), TINY_SPEC, with_casd=variant == "casd")
        present = rng.integers(0, 2, size=num_classes)
        present[int(rng.integers(num_classes))] = 1
        return model, hyper, item, WeakAnnotation(tuple(int(v) for v in present))

    def _check_total_gradient(self, variant):
        rng = np.random.default_rng(7 if variant == "oicr" else 8)
        for _ in range(20):
            model, hyper, item, weak = self._instance(rng, variant)
            targets = compute_targets(model, item, weak)
            _, _, grads = wsod_loss(model, item, weak, targets, hyper)

            def total():
                return wsod_loss(model, item, weak, targets, hyper)[0]

            assert_gradients_match(self, total, model.params, grads, rng)

    def test_oicr_total_gradient(self):
        self._check_total_gradient("oicr")

    def test_casd_total_gradient(self):
        self._check_total_gradient("casd")

    def test_zero_weights_reduce_to_wsddn(self):
        rng = np.random.default_rng(9)
        model, _, item, weak = self._instance(rng, "casd")
        hyper = WsodHyper(variant="casd", num_refinements=2, lambda_d=0.0, lambda_g=0.0, lambda_i=0.0)
        targets = compute_targets(model, item, weak)
        loss, _, _ = wsod_loss(model, item, weak, targets, hyper)
        expected, _ = mlc_loss(image_scores(model, item).p, weak)
        self.assertAlmostEqual(loss, expected, places=12)

    def test_loss_decreases_with_frozen_targets(self):
        rng = np.random.default_rng(10)
        model, hyper, item, weak = self._instance(rng, "oicr")
        targets = compute_targets(model, item, weak)
        losses = []
        for _ in range(20):
            loss, _, grads = wsod_loss(model, item, weak, targets, hyper)
            losses.append(loss)
            for name in model.params:
                model.params[name] = model.params[name] - 1e-3 * grads[name]
        self.assertLess(losses[-1], losses[0])

    def test_train_on_image_reduces_image_loss(self):
        rng = np.random.default_rng(11)
        model, _, item, weak = self._instance(rng, "oicr")
        hyper = WsodHyper(variant="oicr", num_refinements=2, lambda_d=0.0)
        _, losses = train_on_image(model, item, weak, hyper, steps=20, lr=1e-2)
        self.assertLess(losses[-1], losses[0])

    def _biased_detector(self, favoured: int):
        detector = init_detector(3, seed=0, zero=True)
        bias = np.full(4, -4.0)
        bias[favoured - 1] = 4.0
        detector.params["cls_b"] = bias
        return detector

    def test_class_filtered_proposals(self):
        image = random_image(np.random.default_rng(0), 32, 32)
        detector = self._biased_detector(3)
        all_boxes = generate_proposals(detector, image, None, "all", min_proposals=0).boxes
        same = generate_proposals(detector, image, WeakAnnotation((1, 1, 1)), "class-filtered",
                                  min_proposals=0).boxes
        npt.assert_array_equal(all_boxes, same)
        grouped = predict(detector, image)
        class_three = {d.box.as_tuple() for d in grouped[3]}
        only = generate_proposals(detector, image, WeakAnnotation((0, 0, 1)), "class-filtered", min_proposals=0)
        self.assertTrue(all(tuple(b) in class_three for b in only.boxes))
        with self.assertRaises(PreconditionError):
            generate_proposals(detector, image, None, "class-filtered")

    def test_proposal_padding(self):
        image = random_image(np.random.default_rng(0), 32, 32)
        detector = self._biased_detector(1)
        padded = generate_proposals(detector, image, WeakAnnotation((1, 0, 0)), "class-filtered",
                                    min_proposals=10, max_proposals=2)
        self.assertEqual(len(padded), 10)

    def test_train_infer_and_checkpoint(self):
        world = generate_domain(tiny_world_config(), seed=6)
        detector = init_detector(2, seed=0, feature_spec=TINY_SPEC)
        hyper = WsodHyper(steps=3, num_refinements=2, min_proposals=5, max_proposals=10)
        model = train_wsod("casd", world.target_train, detector, hyper, seed=0)
        self.assertTrue(model.use_fe)
        dets = wsod_infer(model, detector, world.target_eval.items[0].image)
        self.assertTrue(all(0.0 < d.score < 1.0 for d in dets))
        path = TEST_ROOT / "wsod.json"
        save_wsod(model, path)
        loaded = load_wsod(path)
        for name, value in model.params.items():
            npt.assert_array_equal(loaded.params[name], value)
        self.assertEqual(loaded.proposal_mode, "class-filtered")

    def test_fe_copies_detector_pathway(self):
        detector = init_detector(2, seed=3, feature_spec=TINY_SPEC)
        model = init_wsod(2, WsodHyper(), seed=0, feature_spec=TINY_SPEC, detector=detector)
        npt.assert_array_equal(model.params["fc1_w"], detector.params["hidden_w"])
        npt.assert_array_equal(model.params["embed_w0"], detector.params["embed_w0"])
        npt.assert_array_equal(model.params["fc2_w"], np.eye(TINY_SPEC.hidden_dim))
        baseline = init_wsod(2, WsodHyper(use_fe=False), seed=0, feature_spec=TINY_SPEC)
        self.assertFalse(baseline.use_fe)

    def test_grid_proposals_without_detector(self):
        world = generate_domain(tiny_world_config(), seed=6)
        hyper = WsodHyper(steps=2, num_refinements=1, use_fe=False, use_detector_proposals=False,
                          variant="oicr")
        model = train_wsod("oicr", world.target_train, None, hyper, seed=0)
        self.assertFalse(model.use_detector_proposals)
        self.assertGreater(len(grid_proposals(world.target_eval.items[0].image)), 0)
        dets = wsod_infer(model, None, world.target_eval.items[0].image)
        self.assertLessEqual(len(dets), 100)


class EvaluationTestCase(unittest.TestCase):
    """AP, mAP and the error breakdown."""

    def test_ap_fixtures(self):
        gt = [ann(((0, 0, 10, 10), 1))]
        for mode in ("11-point", "all-point"):
            self.assertEqual(average_precision([[det((0, 0, 10, 10), 1, 0.9)]], gt, 1, mode=mode), 1.0)
            self.assertEqual(average_precision([[]], gt, 1, mode=mode), 0.0)
        two = [ann(((0, 0, 10, 10), 1), ((20, 20, 30, 30), 1))]
        dets = [[det((0, 0, 10, 10), 1, 0.9), det((40, 40, 45, 45), 1, 0.8)]]
        self.assertAlmostEqual(average_precision(dets, two, 1, mode="all-point"), 0.5, places=12)
        self.assertIsNone(average_precision([[]], [ann()], 1))

    def test_mean_ap(self):
        self.assertEqual(mean_ap([0.7]), 0.7)
        self.assertEqual(mean_ap({1: 1.0, 2: 0.0, 3: None}), 0.5)
        with self.assertRaises(NoDefinedClassesError):
            mean_ap([None, None])

    @staticmethod
    def _random_instance(rng):
        images = int(rng.integers(1, 3))
        dets, gts = [], []
        scores = rng.permutation(np.linspace(0.05, 0.95, 6))
        k = 0
        for _ in range(images):
            cells = rng.integers(0, 4, size=(int(rng.integers(0, 4)), 2)) * 10
            gts.append(ann(*[((x, y, x + 10, y + 10), 1) for x, y in cells]))
            image_dets = []
            for _ in range(int(rng.integers(0, 4))):
                if k == 6:
                    break
                x, y = rng.integers(0, 4, size=2) * 10 + rng.integers(0, 4, size=2)
                image_dets.append(det((x, y, x + 10, y + 10), 1, float(scores[k])))
                k += 1
            dets.append(image_dets)
        return dets, gts

    @staticmethod
    def _brute_force_ap(dets, gts):
        flat = sorted(((d.score, i, d) for i, ds in enumerate(dets) for d in ds), key=lambda t: -t[0])
        positives = sum(len(g) for g in gts)
        points = []
        for k in range(1, len(flat) + 1):
            top = flat[:k]
            tp = 0
            for i, g in enumerate(gts):
                mine = [d for _, j, d in top if j == i]
                tp += len(greedy_match(mine, g, 0.5).pairs)
            points.append((tp / positives, tp / k))
        ap, previous = 0.0, 0.0
        for k, (recall, _) in enumerate(points):
            if recall > previous:
                ap += (recall - previous) * max(p for _, p in points[k:])
                previous = recall
        return ap

    def test_all_point_ap_matches_brute_force(self):
        rng = np.random.default_rng(12)
        checked = 0
        while checked < 500:
            dets, gts = self._random_instance(rng)
            value = average_precision(dets, gts, 1, mode="all-point")
            if sum(len(g) for g in gts) == 0:
                self.assertIsNone(value)
                continue
            self.assertAlmostEqual(value, self._brute_force_ap(dets, gts), places=12)
            checked += 1

    def test_ap_invariant_under_monotone_scores(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            dets, gts = self._random_instance(rng)
            if sum(len(g) for g in gts) == 0:
                continue
            squashed = [[Detection(d.box, d.class_id, d.score ** 3) for d in ds] for ds in dets]
            self.assertEqual(average_precision(dets, gts, 1, mode="all-point"),
                             average_precision(squashed, gts, 1, mode="all-point"))

    def test_evaluate_detections_reports_absent_classes(self):
        result = evaluate_detections([[det((0, 0, 10, 10), 1, 0.9)]], [ann(((0, 0, 10, 10), 1))], 2)
        self.assertEqual(result.mean_ap, 1.0)
        self.assertEqual(result.absent_classes(), [2])

    def test_tide_fixtures(self):
        gts = ann(((0, 0, 10, 10), 1))
        perfect = tide_decompose([det((0, 0, 10, 10), 1, 0.9)], gts)
        self.assertEqual((perfect.correct, perfect.errors), (1, 0))
        background = tide_decompose([det((50, 50, 60, 60), 1, 0.9)], gts)
        self.assertEqual((background.background, background.missed), (1, 1))
        loc = tide_decompose([det((0, 0, 10, 3), 1, 0.9)], gts)
        self.assertEqual(loc.localization, 1)
        cls = tide_decompose([det((0, 0, 10, 10), 2, 0.9)], gts)
        self.assertEqual(cls.classification, 1)
        both = tide_decompose([det((0, 0, 10, 3), 2, 0.9)], gts)
        self.assertEqual(both.both, 1)
        dup = tide_decompose([det((0, 0, 10, 10), 1, 0.9), det((0, 0, 10, 9), 1, 0.8)], gts)
        self.assertEqual((dup.correct, dup.duplicate), (1, 1))

        # the second box overlaps taken A at .538 but B (other class) at .818
        mixed = ann(((0, 0, 10, 10), 1), ((4, 0, 14, 10), 2))
        swapped = tide_decompose([det((0, 0, 10, 10), 1, 0.9), det((3, 0, 13, 10), 1, 0.8)], mixed)
        self.assertEqual((swapped.correct, swapped.classification, swapped.duplicate), (1, 1, 0))
        self.assertEqual(swapped.missed, 1)

    def test_tide_partition(self):
        rng = np.random.default_rng(14)
        for _ in range(200):
            gts = ann(*[((x, y, x + 10, y + 10), int(c)) for x, y, c in
                        zip(rng.integers(0, 40, 4), rng.integers(0, 40, 4), rng.integers(1, 3, 4))])
            dets = sorted((det((x, y, x + w, y + w), int(c), float(s)) for x, y, w, c, s in
                           zip(rng.integers(0, 40, 6), rng.integers(0, 40, 6), rng.integers(3, 14, 6),
                               rng.integers(1, 3, 6), rng.uniform(0, 1, 6))), key=lambda d: -d.score)
            breakdown = tide_decompose(dets, gts)
            self.assertEqual(breakdown.detections, len(dets))
            self.assertEqual(breakdown.correct + breakdown.missed, len(gts))


class RunLedgerTestCase(unittest.TestCase):
    """Covers CRUD helpers inside app.database.operations."""

    def setUp(self):
        reset_database()

    def test_run_stage_artifact_and_metric_flow(self):
        db_ops.create_run("run-1", "warmup", "abc", 0, "/tmp/out")
        db_ops.add_stage("run-1", "FSOD-1", "completed", {"map": 0.25})
        db_ops.add_artifact("run-1", "detector", "/tmp/out/FSOD-1.json", "d1", "abc")
        db_ops.add_metric("run-1", "map", 0.25, {"tag": "FSOD-1"})
        db_ops.finish_run("run-1", "completed")

        run = db_ops.get_run("run-1")
        self.assertEqual(run.status, "completed")
        self.assertIsNotNone(run.finished_at)
        self.assertEqual(db_ops.get_stages("run-1")[0].stage_metrics["map"], 0.25)
        self.assertEqual(db_ops.latest_artifact("/tmp/out/FSOD-1.json").sha256, "d1")
        self.assertEqual(len(db_ops.get_metrics("run-1")), 1)
        self.assertEqual(len(db_ops.get_runs(command="warmup")), 1)


class CommandLineTestCase(unittest.TestCase):
    """End-to-end commands on a tiny world."""

    def setUp(self):
        reset_database()
        self.out = Path(tempfile.mkdtemp(dir=TEST_ROOT))
        self.config = RunConfig(
            seed=1,
            data=tiny_world_config(),
            warmup=tiny_warmup_config(),
            wsod=WsodHyper(steps=2, num_refinements=2, min_proposals=5, max_proposals=10),
            eval=EvalConfig(),
            output_dir=str(self.out),
        )

    def test_config_file_and_overrides(self):
        path = self.config.dump(self.out / "run.yaml")
        loaded = RunConfig.load(path).with_overrides(seed=4, variant="oicr", no_fe=True, skip_g2=True)
        self.assertEqual(loaded.seed, 4)
        self.assertEqual(loaded.wsod_dir_name(), "oicr-nofe")
        self.assertNotIn(WarmupStage.FT_G2, loaded.warmup.plan.stages)
        self.assertNotEqual(loaded.data_hash(), self.config.data_hash())
        (self.out / "bad.yaml").write_text("data: {num_classes: -1}\n")
        with self.assertRaises(ConfigError):
            RunConfig.load(self.out / "bad.yaml")

    def test_gen_data_is_reproducible(self):
        data_dir = cmd_gen_data(self.config)
        first = (data_dir / "manifest.json").read_bytes()
        cmd_gen_data(self.config)
        self.assertEqual(first, (data_dir / "manifest.json").read_bytes())
        other = self.config.model_copy(update={"output_dir": str(self.out / "again")})
        cmd_gen_data(other)
        self.assertEqual(first, (self.out / "again" / "data" / "manifest.json").read_bytes())

    def test_stale_upstream_is_refused(self):
        cmd_gen_data(self.config)
        changed = self.config.with_overrides(seed=2)
        with self.assertRaises(StaleArtifactError):
            require_current(self.out / "data", changed.data_hash(), "datasets")
        with self.assertRaises(MissingArtifactError):
            cmd_warmup(self.config.model_copy(update={"output_dir": str(self.out / "empty")}))

    def test_full_pipeline(self):
        cmd_gen_data(self.config)
        paths = cmd_warmup(self.config)
        self.assertEqual([p.stem for p in paths], [f"FSOD-{k}" for k in range(1, 6)])
        rows = (self.out / "warmup" / "stages.csv").read_text().splitlines()
        self.assertEqual(len(rows), 6)
        self.assertIn("config_hash", rows[0])

        replay = self.config.model_copy(update={"output_dir": str(self.out / "replay")})
        cmd_gen_data(replay)
        cmd_warmup(replay)
        for path in paths:
            self.assertEqual(file_digest(path), file_digest(self.out / "replay" / "warmup" / path.name))

        result, breakdown = cmd_eval(self.config, stage="FSOD-5")
        self.assertTrue(0.0 <= result.mean_ap <= 1.0)
        self.assertTrue((self.out / "eval" / "FSOD-5" / "errors.svg").exists())

        baseline = self.config.with_overrides(no_fe=True, no_op=True)
        model_path = cmd_train_wsod(baseline)
        self.assertEqual(model_path.parent.name, "casd-nofe-noop")
        cmd_eval(baseline)
        full_path = cmd_train_wsod(self.config)
        self.assertEqual(full_path.parent.name, "casd")
        ap_csv = self.out / "eval" / "casd-nofe-noop" / "ap.csv"
        self.assertTrue(ap_csv.read_text().startswith("class_id,class_name,ap,config_hash,seed"))

        report = cmd_report(self.config)
        text = report.read_text()
        self.assertIn("FSOD-5", text)
        self.assertIn("casd-nofe-noop", text)

    def test_main_reports_structured_errors(self):
        code = main_module.run(["eval", "--out", str(self.out), "--checkpoint", str(self.out / "missing.json")])
        self.assertEqual(code, MissingArtifactError.exit_code)
        (self.out / "bad.yaml").write_text("seed: [1, 2]\n")
        self.assertEqual(main_module.run(["gen-data", "--config", str(self.out / "bad.yaml")]),
                         ConfigError.exit_code)

        # an output path that is a regular file fails with an OSError, not a pipeline error
        blocker = self.out / "blocker"
        blocker.write_text("not a directory")
        config_path = self.config.dump(self.out / "run.yaml")
        stderr = io.StringIO()
        with contextlib.redirect_stderr(stderr):
            code = main_module.run(["gen-data", "--config", str(config_path), "--out", str(blocker)])
        self.assertEqual(code, InternalError.exit_code)
        record = json.loads(stderr.getvalue().strip().splitlines()[-1])
        self.assertEqual((record["error"], record["exit_code"]), ("internal", InternalError.exit_code))
        self.assertEqual(db_ops.get_runs(command="gen-data")[0].status, "failed")

    def test_ablation_csv_carries_run_seed(self):
        config = self.config.model_copy(update={
            "ablation": AblationConfig(orders=["S-G1-G2-PLT-AUG"], seeds=[3])})
        medians = cmd_ablate_order(config)
        self.assertEqual(set(medians), {"S-G1-G2-PLT-AUG"})
        rows = read_csv(self.out / "ablation" / "orders.csv")
        self.assertEqual([row["run_seed"] for row in rows], ["3", "median"])
        self.assertTrue(all(row["seed"] == str(config.seed) for row in rows))
        self.assertTrue(all(row["config_hash"] == config.ablation_hash() for row in rows))

    def test_order_trend_notes(self):
        self.assertEqual(check_order_trends({"S-G1-G2-PLT-AUG": 0.5, "S-G2-G1-PLT-AUG": 0.4}), [])
        notes = check_order_trends({"S-G1-G2-PLT-AUG": 0.3, "S-G1-G2-AUG-PLT": 0.4})
        self.assertEqual(len(notes), 1)


if __name__ == "__main__":
    unittest.main()
