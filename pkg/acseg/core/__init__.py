# Core types, errors and file formats
