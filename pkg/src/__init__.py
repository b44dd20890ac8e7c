"""Package marker for src modules."""