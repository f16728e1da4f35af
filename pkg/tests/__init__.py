"""Test package for crnsa."""