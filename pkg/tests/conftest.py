def pytest_configure(config):
    config.addinivalue_line("markers", "slow: runs the finite-difference backend or long training")
