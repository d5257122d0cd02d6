"""
Tests for logger configuration.
"""
import logging

import pytest

from quantkern.utils.logger import LOG_FORMAT, resolve_level, setup_logger


def test_resolve_level(monkeypatch):
    assert resolve_level('debug') == logging.DEBUG
    assert resolve_level(logging.ERROR) == logging.ERROR
    monkeypatch.setenv('QUANTKERN_LOG_LEVEL', 'WARNING')
    assert resolve_level() == logging.WARNING
    with pytest.raises(ValueError):
        resolve_level('chatty')


def test_setup_logger_writes_file(tmp_path):
    log_file = tmp_path / 'logs' / 'run.log'
    logger = setup_logger('quantkern.test.file', level='INFO', log_file=str(log_file), console_output=False)
    logger.info('compiled matvec')
    for handler in logger.handlers:
        handler.flush()
    line = log_file.read_text(encoding='utf-8').strip()
    assert line.endswith('quantkern.test.file - INFO - compiled matvec')
    assert LOG_FORMAT.startswith('%(asctime)s')


def test_setup_logger_attaches_handlers_once():
    first = setup_logger('quantkern.test.once')
    count = len(first.handlers)
    second = setup_logger('quantkern.test.once', level='DEBUG')
    assert second is first
    assert len(second.handlers) == count == 1
    assert second.level == logging.DEBUG
