"""Dom-ST: domain-aware spatiotemporal rainfall-runoff network with model-parallel training."""
