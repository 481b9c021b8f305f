"""DiffOP: optimization-based control policies with implicit-gradient REINFORCE."""
