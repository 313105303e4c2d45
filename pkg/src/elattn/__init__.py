"""elattn - A desk-scale transformer inference engine with EL-attention."""
