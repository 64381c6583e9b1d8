# EarCAN: synthetic ear-canal continuous authentication
