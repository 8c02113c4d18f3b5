"""melsim – multi-level parallel time-stepped simulation of road traffic."""
