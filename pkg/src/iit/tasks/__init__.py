"""Task suites: the conjunction toy, symbolic PVR, grid navigation and random boolean circuits."""
