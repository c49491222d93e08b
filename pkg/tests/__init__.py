# Tests package for divscan
