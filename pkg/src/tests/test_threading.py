from pathlib import Path
import sys
import threading
from unittest import mock
# Make package importable when tests run from project root:
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import numpy as np
import pytest
import torch

from fpm_singleshot import helpers
from fpm_singleshot.helpers import THREADS_ENV, deterministic_torch, make_rng, torch_threads, worker_count
from fpm_singleshot.optics import OpticsConfig, build_pupil, forward_stack, select_centermost
from fpm_singleshot.phantom import PhantomSpec, generate_phantom
from fpm_singleshot.recon import ReconSettings, reconstruct_stack


def test_worker_count_precedence(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "3")
    assert worker_count(8) == 3
    monkeypatch.setenv(THREADS_ENV, "not-a-number")
    assert worker_count(8) == 8
    monkeypatch.delenv(THREADS_ENV)
    assert worker_count(5) == 5
    with mock.patch.object(helpers.psutil, "cpu_count", return_value=6):
        assert worker_count(0) == 6
    with mock.patch.object(helpers.psutil, "cpu_count", return_value=None):
        assert worker_count(0) == 1


def test_torch_threads_sets_and_restores():
    class DummyTorch:
        def __init__(self):
            self.threads = 8
            self.calls = []
        def get_num_threads(self): return self.threads
        def set_num_threads(self, n):
            self.calls.append(('set_num_threads', n))
            self.threads = n
    dummy_torch = DummyTorch()
    with mock.patch.object(helpers, "torch", dummy_torch):
        with torch_threads(1):
            assert dummy_torch.threads == 1
    assert dummy_torch.calls == [('set_num_threads', 1), ('set_num_threads', 8)]


def test_torch_threads_restored_after_error():
    before = torch.get_num_threads()
    with pytest.raises(RuntimeError):
        with torch_threads(1):
            raise RuntimeError("boom")
    assert torch.get_num_threads() == before


def test_overlapping_holders_restore_once_at_the_end():
    before = torch.are_deterministic_algorithms_enabled()
    outer = deterministic_torch()
    inner = deterministic_torch()
    outer.__enter__()
    inner.__enter__()
    outer.__exit__(None, None, None)
    assert torch.are_deterministic_algorithms_enabled()
    inner.__exit__(None, None, None)
    assert torch.are_deterministic_algorithms_enabled() == before


def test_make_rng_is_reproducible():
    assert np.array_equal(make_rng(7).random(5), make_rng(7).random(5))
    assert not np.array_equal(make_rng(7).random(5), make_rng(8).random(5))


def four_patch_problem():
    cfg = OpticsConfig(image_size=(32, 32))
    leds = select_centermost(cfg, 69)
    obj = generate_phantom(PhantomSpec.for_optics(cfg, kind="blobs", seed=1))
    stack = forward_stack(obj, build_pupil(cfg, cfg.image_size), leds, cfg)
    settings = ReconSettings(iterations=10, patch_grid=(2, 2), overlap=4)
    return cfg, leds, stack.with_images(stack.images * 1000.0), settings


def test_patch_workers_pin_torch_threads_and_match_serial(monkeypatch):
    """
    Patch-parallel reconstruction pins torch to one intra-op thread per worker
    and produces the same field as the serial run.
    """
    monkeypatch.delenv(THREADS_ENV, raising=False)
    cfg, leds, stack, settings = four_patch_problem()
    serial = reconstruct_stack(stack, cfg, settings, leds, workers=1)
    threads_before = torch.get_num_threads()
    with mock.patch("fpm_singleshot.recon.torch_threads", wraps=torch_threads) as pin:
        parallel = reconstruct_stack(stack, cfg, settings, leds, workers=4)
    pin.assert_called_once_with(1)
    assert torch.get_num_threads() == threads_before
    np.testing.assert_allclose(parallel.object.values, serial.object.values, rtol=1e-10, atol=1e-10)
    for a, b in zip(parallel.loss_histories, serial.loss_histories):
        np.testing.assert_allclose(a, b, rtol=1e-10)


def test_progress_from_workers_reaches_total(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    cfg, leds, stack, settings = four_patch_problem()
    seen = []
    lock = threading.Lock()

    def progress(done, total):
        with lock:
            seen.append((done, total))

    reconstruct_stack(stack, cfg, settings, leds, workers=4, progress=progress)
    assert all(total == 40 for _, total in seen)
    assert max(done for done, _ in seen) == 40


def test_concurrent_reconstructions_stress():
    """
    Several reconstructions running on their own threads all finish with finite fields.
    """
    cfg, leds, stack, settings = four_patch_problem()
    results = [None] * 4

    def run(k):
        results[k] = reconstruct_stack(stack, cfg, settings, leds, workers=1)

    threads = [threading.Thread(target=run, args=(k,)) for k in range(4)]
    for t in threads: t.start()
    for t in threads: t.join()
    for r in results:
        assert r is not None
        assert np.isfinite(r.object.values).all()


@pytest.mark.parametrize("workers", [1, 4])
def test_repeated_reconstruction_is_bitwise_identical(monkeypatch, workers):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    cfg, leds, stack, settings = four_patch_problem()
    first = reconstruct_stack(stack, cfg, settings, leds, workers=workers)
    second = reconstruct_stack(stack, cfg, settings, leds, workers=workers)
    assert np.array_equal(first.object.values, second.object.values)
    for a, b in zip(first.loss_histories, second.loss_histories):
        assert np.array_equal(a, b)
