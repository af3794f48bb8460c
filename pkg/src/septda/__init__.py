"""SepTDA speech separation for an unknown number of speakers."""
