def pytest_configure(config):
    config.addinivalue_line("markers", "slow: training runs that take tens of seconds or more")
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")
