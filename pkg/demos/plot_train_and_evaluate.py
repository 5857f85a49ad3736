"""
Train and evaluate a small strategy
===================================

A short training run on the jump-diffusion market, with and without
options, followed by an out-of-sample evaluation and a volatility shock.
The run is sized to finish in about a minute. The presets use 2^18 paths.
"""
from dataclasses import replace

from dtipo.evaluation import NeuralStrategy, evaluate_strategy, robustness_eval
from dtipo.market import paper_jump_market
from dtipo.objective import ObjectiveSpec
from dtipo.options import build_price_surface, default_strike_grid
from dtipo.policy import TradingConstraints
from dtipo.trainer import TrainConfig, train

market = paper_jump_market()
objective = ObjectiveSpec()
config = TrainConfig(M_train=2 ** 14, M_batch=2 ** 11, M_epoch=4, seed=0)
prices = build_price_surface(market, default_strike_grid(0.75, 1.25, 21), M_price=2 ** 16, seed=2)

# %%
# Train both variants on the same paths.
results = {}
for label, cons in (("with options", TradingConstraints()),
                    ("without options", TradingConstraints(options_enabled=False))):
    params, log = train(config, market, cons, objective, prices if cons.options_enabled else None)
    print(f"{label}: epoch losses {[round(v, 4) for v in log.epoch_losses()]}")
    results[label] = (NeuralStrategy(params, prices), cons)

# %%
# Evaluate on fresh paths, then double every volatility.
for label, (strategy, cons) in results.items():
    rep = evaluate_strategy(strategy, market, cons, objective, M_eval=2 ** 15, seed=1, train_seed=0)
    w = rep.wealth_terms
    print(f"{label}: mean {w['mean']:.4f}  var {w['var']:.4f}  U {w['U']:.4f}  "
          f"trading cost {rep.trading_cost_pct:.3f}%")
    shocked = robustness_eval(strategy, market, cons, objective, factors=(2.0,), M_eval=2 ** 15, seed=1)[2.0]
    print(f"    vol x2: U {shocked.wealth_terms['U']:.4f}")
    if rep.allocation["option_amounts"]:
        print("    option amounts:", [round(b, 3) for b in rep.allocation["option_amounts"]])
