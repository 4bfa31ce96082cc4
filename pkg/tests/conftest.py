import os

os.environ.setdefault("QATFORGE_DATA", "/root/data/mnist")


def pytest_collection_modifyitems(items):
    # end-to-end assertions last so the fast oracle suites report first
    items.sort(key=lambda it: it.fspath.basename == "test_acceptance.py")
