"""Orchestration: offline pipeline CLI, capture service, synthetic fixtures."""
