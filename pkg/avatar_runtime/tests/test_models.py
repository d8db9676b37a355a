import unittest

import numpy as np

from avatar_runtime import tensor as T
from avatar_runtime.audio import AudioTrack
from avatar_runtime.exceptions import AudioExhaustedError, CacheOrderError, ConfigError, ShapeError
from avatar_runtime.kv_cache import CacheState, append_chunk
from avatar_runtime.models import ModelConfig, as_student, audio_inputs, build_model, kv_entries
from avatar_runtime.tests.helpers import open_cache, reference_and_audio, tiny_config, tiny_model


def _noisy(config, frames, seed=0):
    return np.random.default_rng(seed).standard_normal((frames, config.tokens_per_frame, config.latent_dim))


class ModelConfigTest(unittest.TestCase):

    def test_invalid(self):
        with self.assertRaises(ConfigError):
            tiny_config(model_dim=15)
        with self.assertRaises(ConfigError):
            tiny_config(model_dim=12, heads=4)
        with self.assertRaises(ConfigError):
            tiny_config(window_frames=7)
        with self.assertRaises(ConfigError):
            tiny_config(prediction="sample")
        with self.assertRaises(ConfigError):
            tiny_config(mode="critic")
        with self.assertRaises(ConfigError):
            tiny_config(layers=0)

    def test_architecture_ignores_mode(self):
        config = tiny_config()
        self.assertEqual(config.architecture(), config.with_mode("student").architecture())
        self.assertNotIn("mode", config.architecture())

    def test_from_dict_drops_unknown_keys(self):
        config = ModelConfig.from_dict({"layers": 2, "sink_capacity": 4})
        self.assertEqual(config.layers, 2)

    def test_rope_range_is_window(self):
        self.assertEqual(tiny_config().rope.max_index, 6)


class AudioInputsTest(unittest.TestCase):

    def test_causal_rows(self):
        track = AudioTrack(np.arange(24.0).reshape(8, 3), np.ones(8))
        inputs = audio_inputs(track, [4, 5, 6], True, 3)
        self.assertEqual(inputs.row_frames, (2, 3, 4, 5, 6))
        np.testing.assert_array_equal(inputs.allowed[0], [True, True, True, False, False])
        np.testing.assert_array_equal(inputs.allowed[2], [False, False, True, True, True])
        np.testing.assert_array_equal(inputs.talking[0], track.features[1])

    def test_reference_reads_no_audio(self):
        track = AudioTrack(np.ones((6, 2)), np.ones(6))
        inputs = audio_inputs(track, [0, 1, 2], False, 3)
        self.assertFalse(inputs.allowed[0].any())
        self.assertTrue(inputs.allowed[1:].all())

    def test_listening_frames_route_to_listening_rows(self):
        track = AudioTrack(np.ones((4, 2)), np.array([1, 0, 1, 0]))
        inputs = audio_inputs(track, [1, 2, 3, 4], False, 3)
        np.testing.assert_array_equal(inputs.talking[:, 0], [1, 0, 1, 0])
        np.testing.assert_array_equal(inputs.listening[:, 0], [0, 1, 0, 1])

    def test_exhausted(self):
        track = AudioTrack(np.ones((4, 2)), np.ones(4))
        with self.assertRaises(AudioExhaustedError):
            audio_inputs(track, [3, 4, 5], True, 3)


class TeacherForwardTest(unittest.TestCase):

    def test_output_shape(self):
        model = tiny_model()
        reference, audio = reference_and_audio(model.config, 6)
        out = model.teacher_forward(_noisy(model.config, 6), 0.5, reference, audio)
        self.assertEqual(out.shape, (6, 2, 4))

    def test_blocks_start_as_identity(self):
        model = build_model(tiny_config(), seed=1)
        reference, audio = reference_and_audio(model.config, 6)
        noisy = _noisy(model.config, 6)
        out = model.forward_window(noisy, 0.7, reference, audio, causal=False, return_hidden=True)
        latents = np.concatenate([reference[None], noisy], axis=0)
        embedded = model.patch_embed(latents).data + model.pos_embed.data
        for hidden in out.hidden:
            np.testing.assert_allclose(hidden.data, embedded, atol=1e-12)

    def test_audio_ignored_at_init(self):
        model = build_model(tiny_config(), seed=2)
        reference, audio = reference_and_audio(model.config, 6)
        other = AudioTrack(audio.features * -3.0 + 1.0, 1 - audio.mask)
        noisy = _noisy(model.config, 6)
        np.testing.assert_array_equal(model.teacher_forward(noisy, 0.5, reference, audio).data,
                                      model.teacher_forward(noisy, 0.5, reference, other).data)

    def test_listening_branch_silent_while_talking(self):
        model = tiny_model(seed=3)
        reference, audio = reference_and_audio(model.config, 6)
        talking = AudioTrack(audio.features, np.ones(6))
        ablated = model.clone()
        for block in ablated.blocks:
            block.listen.out.weight.data[:] = 0.0
        noisy = _noisy(model.config, 6)
        np.testing.assert_allclose(model.teacher_forward(noisy, 0.5, reference, talking).data,
                                   ablated.teacher_forward(noisy, 0.5, reference, talking).data, atol=1e-12)
        self.assertFalse(np.allclose(model.teacher_forward(noisy, 0.5, reference, audio).data,
                                     ablated.teacher_forward(noisy, 0.5, reference, audio).data))

    def test_causal_window_does_not_leak(self):
        model = tiny_model(seed=4)
        reference, audio = reference_and_audio(model.config, 6)
        noisy = _noisy(model.config, 6)
        changed = noisy.copy()
        changed[3:] += 1.0
        shifted = AudioTrack(np.concatenate([audio.features[:3], audio.features[3:] + 2.0]), audio.mask)
        base = model.teacher_forward(noisy, 0.5, reference, audio, causal=True).data
        moved = model.teacher_forward(changed, 0.5, reference, shifted, causal=True).data
        np.testing.assert_allclose(base[:3], moved[:3], atol=1e-12)
        self.assertFalse(np.allclose(base[3:], moved[3:]))

    def test_bidirectional_window_does_leak(self):
        model = tiny_model(seed=4)
        reference, audio = reference_and_audio(model.config, 6)
        noisy = _noisy(model.config, 6)
        changed = noisy.copy()
        changed[5] += 1.0
        base = model.teacher_forward(noisy, 0.5, reference, audio).data
        self.assertFalse(np.allclose(base[0], model.teacher_forward(changed, 0.5, reference, audio).data[0]))

    def test_epsilon_parameterisation(self):
        model = tiny_model(seed=5, prediction="epsilon")
        reference, audio = reference_and_audio(model.config, 6)
        noisy = _noisy(model.config, 6)
        out = model.forward_window(noisy, 0.25, reference, audio, causal=False)
        np.testing.assert_allclose(out.x0.data[1:], (noisy - 0.25 * out.raw.data[1:]) / 0.75, atol=1e-12)

    def test_bad_latents(self):
        model = tiny_model()
        with self.assertRaises(ShapeError):
            model.forward(np.zeros((2, 2, 5)), 0.5, [0, 1], np.ones((2, 2), dtype=bool))
        with self.assertRaises(ShapeError):
            model.forward(np.zeros((2, 2, 4)), 0.5, [0, 1], np.ones((2, 3), dtype=bool))

    def test_short_audio(self):
        model = tiny_model()
        reference, audio = reference_and_audio(model.config, 4)
        with self.assertRaises(AudioExhaustedError):
            model.teacher_forward(_noisy(model.config, 6), 0.5, reference, audio)


class TimestepEmbedTest(unittest.TestCase):

    def test_distinct_and_deterministic(self):
        model = tiny_model()
        low, high = model.timestep_embed([0.0, 1.0]).data
        self.assertFalse(np.allclose(low, high))
        np.testing.assert_array_equal(model.timestep_embed([0.3]).data, model.timestep_embed([0.3]).data)

    def test_modulations_are_zero_at_init(self):
        model = build_model(tiny_config())
        for mod in model.modulations(0.5):
            self.assertEqual(mod.shape, (6, 16))
            self.assertFalse(mod.any())


class StudentForwardTest(unittest.TestCase):

    def setUp(self):
        self.model = tiny_model(seed=6, mode="student")
        self.reference, self.audio = reference_and_audio(self.model.config, 12)
        self.cache = CacheState(open_cache())
        append_chunk(self.cache, [self.model.encode_reference(self.reference)])

    def test_first_chunk_matches_masked_window(self):
        chunk = _noisy(self.model.config, 3, seed=1)
        x0, kv, indices = self.model.student_forward_chunk(chunk, [1, 2, 3], 0.66, self.cache, self.audio)
        expected = self.model.teacher_forward(chunk, 0.66, self.reference, self.audio, causal=True)
        np.testing.assert_allclose(x0.data, expected.data, atol=1e-10)
        self.assertEqual(indices, {0: 0, 1: 1, 2: 2, 3: 3})

    def test_second_chunk_matches_masked_window(self):
        first = _noisy(self.model.config, 3, seed=1)
        second = _noisy(self.model.config, 3, seed=2)
        _, kv, _ = self.model.student_forward_chunk(first, [1, 2, 3], 0.33, self.cache, self.audio)
        append_chunk(self.cache, kv_entries(kv, [1, 2, 3]))
        x0, _, _ = self.model.student_forward_chunk(second, [4, 5, 6], 0.33, self.cache, self.audio)
        window = self.model.forward_window(np.concatenate([first, second]), 0.33, self.reference,
                                           self.audio, causal=True)
        np.testing.assert_allclose(x0.data, window.x0.data[4:], atol=1e-10)

    def test_emits_kv_for_each_chunk_frame(self):
        chunk = _noisy(self.model.config, 3)
        _, kv, _ = self.model.student_forward_chunk(chunk, [1, 2, 3], 1.0, self.cache, self.audio)
        self.assertEqual(len(kv), 2)
        for keys, values in kv:
            self.assertEqual(keys.shape, (3, 2, 2, 8))
            self.assertEqual(values.shape, (3, 2, 2, 8))
        self.assertEqual([e.frame_id for e in kv_entries(kv, [1, 2, 3])], [1, 2, 3])

    def test_deterministic(self):
        chunk = _noisy(self.model.config, 3)
        first = self.model.student_forward_chunk(chunk, [1, 2, 3], 0.66, self.cache, self.audio)[0]
        second = self.model.student_forward_chunk(chunk, [1, 2, 3], 0.66, self.cache, self.audio)[0]
        np.testing.assert_array_equal(first.data, second.data)

    def test_cache_preconditions(self):
        chunk = _noisy(self.model.config, 3)
        with self.assertRaises(CacheOrderError):
            self.model.student_forward_chunk(chunk, [1, 2, 3], 1.0, CacheState(open_cache()), self.audio)
        with self.assertRaises(CacheOrderError):
            self.model.student_forward_chunk(chunk, [1, 3, 4], 1.0, self.cache, self.audio)
        with self.assertRaises(CacheOrderError):
            self.model.student_forward_chunk(chunk, [0, 1, 2], 1.0, self.cache, self.audio)

    def test_reference_entry(self):
        entry = self.model.encode_reference(self.reference)
        self.assertEqual(entry.frame_id, 0)
        self.assertEqual(entry.source, "reference")
        self.assertEqual(len(entry.keys), 2)
        self.assertEqual(entry.keys[0].shape, (2, 2, 8))


class StudentFromTeacherTest(unittest.TestCase):

    def test_weights_carry_over(self):
        teacher = tiny_model(seed=7)
        student = as_student(teacher)
        self.assertEqual(student.mode, "student")
        self.assertEqual(teacher.mode, "teacher")
        for name, value in teacher.state_dict().items():
            np.testing.assert_array_equal(student.state_dict()[name], value)
        student.prompt.data[0, 0] += 1.0
        self.assertNotEqual(student.prompt.data[0, 0], teacher.prompt.data[0, 0])

    def test_same_masked_output(self):
        teacher = tiny_model(seed=8)
        student = as_student(teacher)
        reference, audio = reference_and_audio(teacher.config, 6)
        noisy = _noisy(teacher.config, 6)
        np.testing.assert_allclose(student.teacher_forward(noisy, 0.4, reference, audio, causal=True).data,
                                   teacher.teacher_forward(noisy, 0.4, reference, audio, causal=True).data,
                                   atol=1e-12)

    def test_gradients_reach_every_parameter(self):
        model = tiny_model(seed=9)
        reference, audio = reference_and_audio(model.config, 6)
        loss = T.mean(model.teacher_forward(_noisy(model.config, 6), 0.5, reference, audio) ** 2)
        T.backward(loss)
        missing = [name for name, p in model.named_parameters() if p.grad is None]
        self.assertEqual(missing, [])


if __name__ == "__main__":
    unittest.main()
