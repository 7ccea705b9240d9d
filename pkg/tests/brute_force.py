"""Independent brute-force matcher used as the engine's test oracle.

Re-derives the matching rules per window from scratch with plain lists and
dicts: enumerate every sliding window, collect its events, and replay the
greedy semantics (guard kills, oldest-first extension, per-branch seeding,
first-event consumption) without any of the engine's incremental machinery.
"""

from __future__ import annotations


def oracle_detections(events, patterns, kills_all=True):
    """Set of (pattern id, window id, bound seqs) detection identities."""
    events = list(events)
    out = set()
    if not events:
        return out
    max_ts = max(e.ts for e in events)
    for pattern in patterns:
        k = 0
        while k * pattern.slide <= max_ts:
            start = k * pattern.slide
            end = start + pattern.window_size
            in_window = [e for e in events if start <= e.ts < end]
            out |= _match_window(in_window, pattern, k, kills_all)
            k += 1
    return out


def _match_window(events, pattern, window_id, kills_all):
    detections = set()
    pms = []  # creation order
    consumed = set()
    for e in events:
        _kill_guarded(pms, pattern, e, kills_all)
        _extend_oldest(pms, pattern, e, window_id, detections, consumed)
        _seed(pms, pattern, e, window_id, detections, consumed)
    return detections


def _new_pm(branch_idx, n_elements):
    return {
        "branch": branch_idx,
        "bindings": [[] for _ in range(n_elements)],
        "cursor": 0,  # next element still to satisfy
        "kleene_open": None,
        "alive": True,
    }


def _guard_indices(pattern, pm):
    """Consecutive negated element indices from the cursor."""
    elements = pattern.branches[pm["branch"]].elements
    guards = []
    for i in range(pm["cursor"], len(elements)):
        if elements[i].negated:
            guards.append(i)
        else:
            break
    return guards


def _target_index(pattern, pm):
    """First non-negated element at or after the cursor."""
    elements = pattern.branches[pm["branch"]].elements
    for i in range(pm["cursor"], len(elements)):
        if not elements[i].negated:
            return i
    return None


def _kill_guarded(pms, pattern, e, kills_all):
    for pm in pms:
        if not pm["alive"]:
            continue
        branch = pattern.branches[pm["branch"]]
        for g in _guard_indices(pattern, pm):
            el = branch.elements[g]
            if e.type_id in el.type_ids:
                if branch.predicate.evaluate(pm["bindings"], g, e) is not False:
                    pm["alive"] = False
                    break
        if not pm["alive"] and not kills_all:
            return


def _extend_oldest(pms, pattern, e, window_id, detections, consumed):
    for pm in pms:
        if not pm["alive"]:
            continue
        branch = pattern.branches[pm["branch"]]
        if pm["kleene_open"] is not None:
            ki = pm["kleene_open"]
            el = branch.elements[ki]
            if e.type_id in el.type_ids:
                if branch.predicate.evaluate(pm["bindings"], ki, e) is not False:
                    pm["bindings"][ki].append(e)
                    return
        ti = _target_index(pattern, pm)
        if ti is None:
            continue
        el = branch.elements[ti]
        if e.type_id not in el.type_ids:
            continue
        if branch.predicate.evaluate(pm["bindings"], ti, e) is False:
            continue
        pm["bindings"][ti].append(e)
        _after_bind(pm, pattern, ti, window_id, detections, consumed)
        return


def _seed(pms, pattern, e, window_id, detections, consumed):
    if e.seq in consumed:
        return
    for branch_idx, branch in enumerate(pattern.branches):
        el = branch.elements[0]
        if e.type_id not in el.type_ids:
            continue
        pm = _new_pm(branch_idx, len(branch.elements))
        if branch.predicate.evaluate(pm["bindings"], 0, e) is False:
            continue
        pm["bindings"][0].append(e)
        pms.append(pm)
        _after_bind(pm, pattern, 0, window_id, detections, consumed)


def _after_bind(pm, pattern, idx, window_id, detections, consumed):
    branch = pattern.branches[pm["branch"]]
    el = branch.elements[idx]
    pm["kleene_open"] = None
    if el.kleene:
        pm["kleene_open"] = idx
        pm["cursor"] = idx + 1
    elif len(pm["bindings"][idx]) < el.count:
        pm["cursor"] = idx
    else:
        pm["cursor"] = idx + 1
    if pm["cursor"] >= len(branch.elements):
        seqs = tuple(ev.seq for bound in pm["bindings"] for ev in bound)
        detections.add((pattern.id, window_id, seqs))
        consumed.add(seqs[0])
        pm["alive"] = False
