from histoage.config.settings import PipelineConfig, load_config, config_hash

__all__ = ["PipelineConfig", "load_config", "config_hash"]
