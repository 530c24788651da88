"""Núcleo numérico: tensores com autodiff, projeção, modelo, otimização, treino e métricas."""
