"""Central difference convolution networks for face anti-spoofing."""
