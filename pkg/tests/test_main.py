"""Tests for crnsa.__main__ module."""

import crnsa


class TestMainModule:
    """Test the __main__.py module."""

    def test_main_entry_point(self):
        """Test that the main module exposes the CLI group."""
        from crnsa.__main__ import cli
        assert callable(cli)

    def test_version(self):
        """Test the package version string."""
        assert crnsa.__version__ == "0.1.0"

    def test_public_api(self):
        """Test that every exported name resolves."""
        for name in crnsa.__all__:
            assert hasattr(crnsa, name)
