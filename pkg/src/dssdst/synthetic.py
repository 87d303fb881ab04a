"""Small templated corpus in the TRADE format, used for smoke tests and overfitting checks."""

from __future__ import annotations

import random

from .ontology import DONTCARE, Ontology

# slot -> (values, categorical)
SLOTS: dict[str, tuple[tuple[str, ...], bool]] = {
    "hotel-area": (("north", "south", "east", "west", "centre"), True),
    "hotel-price range": (("cheap", "moderate", "expensive"), True),
    "hotel-name": (("acorn house", "bridge lodge", "city inn", "the gables", "park view"), False),
    "restaurant-food": (("italian", "chinese", "indian", "thai", "french"), False),
    "restaurant-book day": (("monday", "tuesday", "wednesday", "thursday", "friday"), True),
    "restaurant-book people": (("1", "2", "3", "4", "5"), True),
    "taxi-destination": (("the station", "the airport", "the museum", "the market", "the castle"), False),
    "taxi-departure": (("the college", "the park", "the library", "the hospital", "the stadium"), False),
    "taxi-leave at": (("09:00", "10:30", "12:15", "14:45", "17:00"), False),
}

DONTCARE_SLOTS = ("hotel-area", "hotel-price range")

_ASK = {
    "hotel-area": "i want a hotel in the {v}",
    "hotel-price range": "the hotel should be {v}",
    "hotel-name": "i am looking for {v}",
    "restaurant-food": "i would like {v} food",
    "restaurant-book day": "book a table on {v}",
    "restaurant-book people": "a table for {v} people",
    "taxi-destination": "i need a taxi to {v}",
    "taxi-departure": "pick me up from {v}",
    "taxi-leave at": "i want to leave at {v}",
}
_DONTCARE = {
    "hotel-area": "i don't care about the area",
    "hotel-price range": "the price does not matter , i don't care",
}
_OFFER = {
    "hotel-name": "how about {v} ?",
    "restaurant-food": "there is a nice {v} place .",
    "hotel-area": "there are some in the {v} .",
}
_FILLER_SYS = ("what else can i do ?", "anything else ?", "sure .", "okay .")
_FILLER_USER = ("thanks .", "great , thank you .", "that is all .")


def ontology() -> Ontology:
    """The synthetic ontology; categorical slots also admit ``dontcare`` where the templates use it."""
    mapping = {}
    for slot, (values, cat) in SLOTS.items():
        vals = list(values) + ([DONTCARE] if slot in DONTCARE_SLOTS else [])
        mapping[slot] = {"values": vals, "categorical": cat}
    return Ontology.from_mapping(mapping)


def _domain(slot: str) -> str:
    return slot.split("-", 1)[0]


def generate_dialogue(rng: random.Random, ident: str, max_turns: int = 4) -> dict:
    domains = sorted(rng.sample(["hotel", "restaurant", "taxi"], rng.choice([1, 1, 2])))
    slots = [s for s in SLOTS if _domain(s) in domains]
    state: dict[str, str] = {}
    turns = []
    system = ""
    for t in range(rng.randint(max(1, max_turns - 1), max_turns)):
        user_parts, sys_offer = [], None
        open_slots = [s for s in slots if s not in state]
        r = rng.random()
        if t > 0 and r < 0.15:
            pass  # no update this turn
        elif state and r < 0.3:
            slot = rng.choice(sorted(state))
            values = [v for v in SLOTS[slot][0] if v != state[slot]]
            v = rng.choice(values)
            user_parts.append("actually , " + _ASK[slot].format(v=v) + " instead")
            state[slot] = v
        elif open_slots:
            for slot in rng.sample(open_slots, min(len(open_slots), rng.choice([1, 1, 2]))):
                v = rng.choice(SLOTS[slot][0])
                if slot in _OFFER and sys_offer is None and rng.random() < 0.25:
                    sys_offer = _OFFER[slot].format(v=v)
                    user_parts.append("yes , that sounds good")
                elif slot in _DONTCARE and rng.random() < 0.2:
                    v = DONTCARE
                    user_parts.append(_DONTCARE[slot])
                else:
                    user_parts.append(_ASK[slot].format(v=v))
                state[slot] = v
        if sys_offer is not None:
            system = sys_offer
        user = " and ".join(user_parts) + " ." if user_parts else rng.choice(_FILLER_USER)
        turns.append(
            {
                "turn_idx": t,
                "system_transcript": system,
                "transcript": user,
                "domain": domains[0],
                "belief_state": [{"slots": [[s, v]], "act": "inform"} for s, v in sorted(state.items())],
            }
        )
        system = rng.choice(_FILLER_SYS)
    return {"dialogue_idx": ident, "domains": domains, "dialogue": turns}


def generate_corpus(n_dialogues: int, seed: int = 0, max_turns: int = 4, prefix: str = "syn") -> list[dict]:
    rng = random.Random(seed)
    return [generate_dialogue(rng, f"{prefix}{i:05d}", max_turns) for i in range(n_dialogues)]
