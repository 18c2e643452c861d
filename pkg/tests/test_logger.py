"""Tests for log handler setup and teardown."""

import logging

import pytest

from raca.utils.logger import close_logging, get_logger, setup_logging


@pytest.fixture(autouse=True)
def reset_logger():
    yield
    close_logging()


def file_handlers(logger):
    return [h for h in logger.handlers if isinstance(h, logging.FileHandler)]


def test_second_setup_closes_previous_log_file(tmp_path):
    first_log = tmp_path / "first" / "train.log"
    logger = setup_logging("INFO", first_log)
    (first,) = file_handlers(logger)
    logger.info("first run")

    setup_logging("INFO", tmp_path / "second" / "train.log")
    assert first.stream is None
    assert first not in logger.handlers
    get_logger().info("second run")

    assert "first run" in first_log.read_text()
    assert "second run" not in first_log.read_text()
    assert "second run" in (tmp_path / "second" / "train.log").read_text()


def test_levels_and_unknown_level_fallback(tmp_path):
    assert setup_logging("debug").level == logging.DEBUG
    assert setup_logging("LOUD").level == logging.INFO
    logger = setup_logging("WARNING", tmp_path / "train.log")
    assert all(h.level == logging.WARNING for h in logger.handlers)
    assert len(logger.handlers) == 2


def test_close_logging_detaches_everything(tmp_path):
    logger = setup_logging("INFO", tmp_path / "train.log")
    (handler,) = file_handlers(logger)
    close_logging()
    assert logger.handlers == []
    assert handler.stream is None
