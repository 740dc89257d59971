# snch-harness: 確率的非局所 Cahn–Hilliard 方程式のガレルキンシミュレータと検証ハーネス
