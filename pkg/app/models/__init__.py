# ドメイン型（設定・チャート・軌道・結果）
