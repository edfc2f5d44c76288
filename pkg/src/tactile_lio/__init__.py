"""LiDAR-IMU-leg odometry with an online-trained, tactile-aware leg kinematics network."""

__version__ = "0.1.0"
