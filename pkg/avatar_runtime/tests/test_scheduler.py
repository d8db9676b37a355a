import unittest

import numpy as np

from avatar_runtime.exceptions import AudioExhaustedError, CacheConfigError, ScheduleError
from avatar_runtime.kv_cache import CacheConfig, CacheState, append_chunk
from avatar_runtime.scheduler import (Instrumentation, LatentChunk, NoiseSchedule, add_noise, chunk_noise, collect,
                                      denoise_chunk, flow_step, rollout, teacher_sample, window_noise)
from avatar_runtime.tests.helpers import open_cache, reference_and_audio, slow, tiny_model


class NoiseScheduleTest(unittest.TestCase):

    def test_default_levels(self):
        schedule = NoiseSchedule()
        self.assertEqual(schedule.sigmas, (1.0, 0.66, 0.33))
        self.assertEqual(schedule.steps, 3)
        self.assertEqual(schedule.next_level(0), 0.66)
        self.assertEqual(schedule.next_level(2), 0.0)

    def test_invalid(self):
        with self.assertRaises(ScheduleError):
            NoiseSchedule(())
        with self.assertRaises(ScheduleError):
            NoiseSchedule((1.0, 1.0))
        with self.assertRaises(ScheduleError):
            NoiseSchedule((0.5, 0.8))
        with self.assertRaises(ScheduleError):
            NoiseSchedule((1.2, 0.5))
        with self.assertRaises(ScheduleError):
            NoiseSchedule((1.0, 0.0))
        with self.assertRaises(ScheduleError):
            NoiseSchedule.uniform(0)

    def test_uniform(self):
        np.testing.assert_allclose(NoiseSchedule.uniform(4).sigmas, [1.0, 0.75, 0.5, 0.25])

    def test_teacher_grid_contains_schedule(self):
        schedule = NoiseSchedule()
        grid = schedule.teacher_grid(20)
        for sigma in schedule.sigmas:
            self.assertTrue(grid.contains(sigma))
        self.assertEqual(grid.steps, 22)
        self.assertEqual(NoiseSchedule((1.0, 0.5)).teacher_grid(4).steps, 4)


class NoiseTest(unittest.TestCase):

    def test_full_noise_statistics(self):
        noisy = add_noise(np.full((200, 50), 3.0), 1.0, seed=0)
        self.assertAlmostEqual(noisy.mean(), 0.0, delta=0.05)
        self.assertAlmostEqual(noisy.var(), 1.0, delta=0.06)

    def test_interpolation(self):
        clean = np.ones((4, 3))
        noisy = add_noise(clean, 0.25, rng=np.random.default_rng(1))
        eps = np.random.default_rng(1).standard_normal((4, 3))
        np.testing.assert_allclose(noisy, 0.75 * clean + 0.25 * eps)

    def test_bad_level(self):
        with self.assertRaises(ScheduleError):
            add_noise(np.ones(3), 0.0)

    def test_flow_step_recovers_trajectory(self):
        rng = np.random.default_rng(2)
        clean, eps = rng.standard_normal((2, 5))
        x = 0.4 * clean + 0.6 * eps
        np.testing.assert_allclose(flow_step(x, clean, 0.6, 0.2), 0.8 * clean + 0.2 * eps)
        np.testing.assert_array_equal(flow_step(x, clean, 0.6, 0.0), clean)

    def test_chunk_noise_is_seeded_per_chunk(self):
        np.testing.assert_array_equal(chunk_noise(3, 2, (2, 2)), chunk_noise(3, 2, (2, 2)))
        self.assertFalse(np.array_equal(chunk_noise(3, 2, (2, 2)), chunk_noise(3, 3, (2, 2))))


class DenoiseChunkTest(unittest.TestCase):

    def setUp(self):
        self.model = tiny_model(seed=1, mode="student")
        self.reference, self.audio = reference_and_audio(self.model.config, 12)
        self.cache = CacheState(open_cache())
        append_chunk(self.cache, [self.model.encode_reference(self.reference)])
        self.chunk = LatentChunk(1, (1, 2, 3), chunk_noise(0, 1, (3, 2, 4)), 1.0)

    def test_one_forward_per_level(self):
        stats = Instrumentation()
        result = denoise_chunk(self.model, self.cache, self.chunk, self.audio, NoiseSchedule(), stats)
        self.assertEqual(stats.forwards, 3)
        self.assertEqual(result.chunk.sigma, 0.0)
        self.assertEqual([e.frame_id for e in result.entries], [1, 2, 3])
        np.testing.assert_array_equal(result.chunk.latents, result.prediction.data)
        self.assertEqual(stats.context_sources, {"reference"})

    def test_cached_kv_comes_from_final_forward(self):
        result = denoise_chunk(self.model, self.cache, self.chunk, self.audio, NoiseSchedule())
        _, kv, _ = self.model.student_forward_chunk(result.final_input, [1, 2, 3], 0.33, self.cache, self.audio)
        np.testing.assert_allclose(result.entries[0].keys[1], kv[1][0][0], atol=1e-12)

    def test_clean_recache_adds_a_forward(self):
        stats = Instrumentation()
        result = denoise_chunk(self.model, self.cache, self.chunk, self.audio, NoiseSchedule(), stats,
                               clean_recache=True)
        self.assertEqual(stats.forwards, 4)
        _, kv, _ = self.model.student_forward_chunk(result.chunk.latents, [1, 2, 3], 0.0, self.cache, self.audio)
        np.testing.assert_allclose(result.entries[2].values[0], kv[0][1][2], atol=1e-12)

    def test_prediction_keeps_tape_on_request(self):
        result = denoise_chunk(self.model, self.cache, self.chunk, self.audio, NoiseSchedule(), grad_last=True)
        self.assertTrue(result.prediction.requires_grad)
        plain = denoise_chunk(self.model, self.cache, self.chunk, self.audio, NoiseSchedule())
        self.assertFalse(plain.prediction.requires_grad)


class RolloutTest(unittest.TestCase):

    def setUp(self):
        self.model = tiny_model(seed=2, mode="student", window_frames=12)

    def test_forward_count(self):
        reference, audio = reference_and_audio(self.model.config, 15)
        stats = Instrumentation()
        chunks = list(rollout(self.model, reference, audio, 5, CacheConfig(),
                              NoiseSchedule(), instrumentation=stats))
        self.assertEqual(len(chunks), 5)
        self.assertEqual(stats.forwards, 15)
        self.assertEqual(stats.reference_forwards, 1)
        self.assertEqual(len(stats.chunk_seconds), 5)

    def test_forward_count_with_clean_recache(self):
        reference, audio = reference_and_audio(self.model.config, 12)
        stats = Instrumentation()
        list(rollout(self.model, reference, audio, 4, CacheConfig(),
                     NoiseSchedule(), instrumentation=stats, clean_recache=True))
        self.assertEqual(stats.forwards, 16)

    def test_chunks_match_causal_window(self):
        reference, audio = reference_and_audio(self.model.config, 12)
        chunks = list(rollout(self.model, reference, audio, 4, open_cache(), NoiseSchedule(), seed=5))
        inputs = np.concatenate([c.final_input for c in chunks])
        window = self.model.forward_window(inputs, 0.33, reference, audio, causal=True)
        for chunk in chunks:
            rows = slice(chunk.frame_ids[0], chunk.frame_ids[-1] + 1)
            np.testing.assert_allclose(chunk.prediction.data, window.x0.data[rows], atol=1e-9)

    def test_positions_stay_bounded(self):
        reference, audio = reference_and_audio(self.model.config, 120)
        stats = Instrumentation()
        for _ in rollout(self.model, reference, audio, 40, CacheConfig(),
                         NoiseSchedule(), instrumentation=stats):
            pass
        self.assertLessEqual(stats.max_position, 10)
        self.assertFalse(stats.out_of_range)

    def test_positions_grow_without_reencoding(self):
        reference, audio = reference_and_audio(self.model.config, 30)
        stats = Instrumentation()
        config = CacheConfig(rapr_enabled=False)
        collect(rollout(self.model, reference, audio, 10, config, NoiseSchedule(), instrumentation=stats))
        self.assertEqual(stats.max_position, 30)
        self.assertTrue(stats.out_of_range)

    def test_deterministic(self):
        reference, audio = reference_and_audio(self.model.config, 9)
        config = CacheConfig()
        first = collect(rollout(self.model, reference, audio, 3, config, NoiseSchedule(), seed=4))
        second = collect(rollout(self.model, reference, audio, 3, config, NoiseSchedule(), seed=4))
        np.testing.assert_array_equal(first, second)
        self.assertEqual(first.shape, (9, 2, 4))

    def test_resumes_from_cache(self):
        reference, audio = reference_and_audio(self.model.config, 12)
        config = CacheConfig()
        whole = collect(rollout(self.model, reference, audio, 4, config, NoiseSchedule(), seed=1))
        cache = CacheState(config)
        append_chunk(cache, [self.model.encode_reference(reference)])
        head = collect(rollout(self.model, reference, audio, 2, config, NoiseSchedule(), seed=1, cache=cache))
        tail = collect(rollout(self.model, reference, audio, 2, config, NoiseSchedule(), seed=1, cache=cache))
        np.testing.assert_array_equal(np.concatenate([head, tail]), whole)

    def test_validates_eagerly(self):
        reference, audio = reference_and_audio(self.model.config, 6)
        with self.assertRaises(AudioExhaustedError):
            rollout(self.model, reference, audio, 3, CacheConfig(), NoiseSchedule())
        with self.assertRaises(CacheConfigError):
            rollout(self.model, reference, audio, 1, CacheConfig(sink_capacity=1, chunk_size=2),
                    NoiseSchedule())

    def test_window_noise_matches_rollout(self):
        reference, audio = reference_and_audio(self.model.config, 12)
        chunks = list(rollout(self.model, reference, audio, 4, open_cache(), NoiseSchedule((1.0,)), seed=8))
        np.testing.assert_array_equal(np.concatenate([c.final_input for c in chunks]),
                                      window_noise(8, 4, (3, 2, 4)))

    @slow
    def test_ten_thousand_frames(self):
        reference, audio = reference_and_audio(self.model.config, 10_002)
        config = CacheConfig()
        cache = CacheState(config)
        append_chunk(cache, [self.model.encode_reference(reference)])
        stats = Instrumentation()
        last = None
        for chunk in rollout(self.model, reference, audio, 3334, config, NoiseSchedule(),
                             instrumentation=stats, cache=cache):
            last = chunk
        self.assertEqual(last.frame_ids[-1], 10_002)
        self.assertTrue(np.all(np.isfinite(last.clean)))
        self.assertEqual(stats.forwards, 3334 * 3)
        self.assertLessEqual(stats.max_position, 10)
        self.assertFalse(stats.out_of_range)
        self.assertIn(0, cache)
        self.assertEqual(len(cache.sink), 4)
        self.assertEqual(len(cache), config.capacity)


class TeacherSampleTest(unittest.TestCase):

    def test_snapshots_on_grid(self):
        model = tiny_model(seed=3)
        reference, audio = reference_and_audio(model.config, 6)
        grid = NoiseSchedule().teacher_grid(8)
        noise = chunk_noise(0, 0, (6, 2, 4))
        clean, snapshots = teacher_sample(model, noise, reference, audio, grid, record=(1.0, 0.66, 0.33))
        self.assertEqual(sorted(snapshots), [0.33, 0.66, 1.0])
        np.testing.assert_array_equal(snapshots[1.0], noise)
        self.assertEqual(clean.shape, (6, 2, 4))
        self.assertTrue(np.all(np.isfinite(clean)))

    def test_level_off_grid(self):
        model = tiny_model(seed=3)
        reference, audio = reference_and_audio(model.config, 6)
        with self.assertRaises(ScheduleError):
            teacher_sample(model, chunk_noise(0, 0, (6, 2, 4)), reference, audio, NoiseSchedule.uniform(4),
                           record=(0.66,))


if __name__ == "__main__":
    unittest.main()
