# Services ServoGuard
