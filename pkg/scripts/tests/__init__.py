"""
Test suite for the anomaly detection engine.

Unit tests cover one module each (test_core.py, test_mfsc.py, ...);
test_pipeline.py runs end-to-end fits on the synthetic fixtures and
test_cli.py drives scripts/fgad.py.
"""
