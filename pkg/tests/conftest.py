from hypothesis import settings

# The suite must be reproducible run to run; property tests explore a fixed
# corpus. Deadlines are disabled because numeric cases vary wildly in cost.
settings.register_profile("deterministic", derandomize=True, deadline=None)
settings.load_profile("deterministic")
