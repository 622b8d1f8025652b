"""Training-graph compiler and static memory planner for extreme-edge devices."""
