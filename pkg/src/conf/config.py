from pydantic import BaseSettings


class Settings(BaseSettings):
    log_config: str = 'src/conf/logging.ini'
    log_level: str = 'INFO'
    log_file: str = 'robust_hpt.log'
    jobs: int = 1

    gp_restarts: int = 8
    gp_noise_floor: float = 1e-6
    jitter_start: float = 1e-10
    jitter_max: float = 1e-4

    max_candidates: int = 4096
    kg_fantasies: int = 32
    kg_proposals: int = 64
    cost_c0: float = 1.0

    time_grid_points: int = 200
    eval_attack_iters: int = 20
    divergence_threshold: float = 1e6
    simulated_unit_cost: float = 1e-4

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"


settings = Settings()
