"""On-disk formats: scene directories, checkpoints, BEV map files"""
