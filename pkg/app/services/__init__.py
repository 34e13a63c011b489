# サービス層
# - symplectic.py / model_library.py: 幾何と系
# - noise.py / sde_engine.py: 乱数と積分
# - averaging.py / poisson.py / second_order.py: 一次・二次の極限
# - job_processor.py / table_writer.py: 実行と出力
