import jax

# populations of 1e5 next to rates of 1e-3 need double precision throughout
jax.config.update("jax_enable_x64", True)
