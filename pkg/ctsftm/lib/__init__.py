# ctSFTM analysis library
# Flat modules for trajectories, nuisance fits, g-estimation and simulation
