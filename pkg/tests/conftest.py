import hypothesis

hypothesis.settings.register_profile(
    "beamckm", deadline=None, max_examples=30,
    suppress_health_check=[hypothesis.HealthCheck.too_slow])
hypothesis.settings.load_profile("beamckm")
