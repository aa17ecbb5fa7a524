"""Instance generators, diagnostics and result export."""
