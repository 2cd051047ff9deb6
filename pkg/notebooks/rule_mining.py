# -*- coding: utf-8 -*-
"""
Mining cross-KG Horn rules
==========================

Merge the background and target KGs at aligned entities and score every
one-hop and two-hop rule whose body lives in the other KG.
"""

###########################################################################
# The joint graph prefixes relations with their source KG.

from kgtransfer import generate_transfer_scenario, mine_rules, rule_report

sc = generate_transfer_scenario(seed=0)
joint = sc.joint().kg
print(joint.num_entities, "entities after merging,", len(joint.relations), "relations")

###########################################################################
# Top rules. The planted chain should lead with confidence near the value
# the generator reports.

rules = mine_rules(joint, max_body=2, min_confidence=0.3, min_support=5)
print(rule_report(rules[:10]))
print("planted confidence %.2f" % sc.planted_confidence)

###########################################################################
# Same-KG rules are excluded by default. Allowing them adds the trivial
# inverse-style patterns back.

print(len(rules), "cross-KG rules vs",
      len(mine_rules(joint, 2, 0.3, 5, cross_kg=False)), "with same-KG bodies")
