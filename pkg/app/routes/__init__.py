# ハーネスのルーター（argparse のサブコマンド）
