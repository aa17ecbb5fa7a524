"""Dense simplex oracle for desk-scale instances."""
