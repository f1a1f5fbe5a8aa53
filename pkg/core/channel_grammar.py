import json
import logging
import re
from typing import Iterable, List

from data_models.schemas import ChannelParts, TokenFlowGraph, TokenSequence
from utils.errors import BadDeviceInstance, EmptyResult, ForbiddenCharacter, NotConvention

logger = logging.getLogger(__name__)

# Unicode-aware: descriptions are free UTF-8 text. Underscore is a separator, never part of a token.
_ALNUM_RUN = re.compile(r'[^\W_]+')
_LETTER_OR_DIGIT_RUN = re.compile(r'[^\W\d_]+|\d+')
_TRAILING_DIGITS = re.compile(r'^(.*?)([0-9]+)$')

# '-' is reserved too, but one occurrence inside the DeviceID segment separates the SubDevice.
FORBIDDEN_CHARACTERS = frozenset("{}[].-+=~*|<>")


def tokenize_event(pv: str, description: str = "") -> TokenSequence:
    """
    Embedding tokenizer. Keeps alphanumeric runs intact, so 'SR07U:GDS1E:BC02' gives
    [SR07U, GDS1E, BC02]. PV tokens come first, then description tokens.
    """
    tokens = _ALNUM_RUN.findall(f"{pv} {description}")
    if not tokens:
        raise EmptyResult(f"no alphanumeric content in '{pv}'")
    return TokenSequence(tuple(tokens))


def tokenize_grammar(pv: str, strip_numbers: bool = False) -> TokenSequence:
    """
    Grammar tokenizer. Also splits letter/digit boundaries: 'GDS1E' -> [GDS, 1, E].
    With strip_numbers the purely numeric tokens are dropped.
    """
    tokens = _LETTER_OR_DIGIT_RUN.findall(pv)
    if strip_numbers:
        tokens = [t for t in tokens if not t.isdecimal()]
    if not tokens:
        raise EmptyResult(f"no {'alphabetic' if strip_numbers else 'alphanumeric'} content in '{pv}'")
    return TokenSequence(tuple(tokens))


def tokenize(mode: str, pv: str, description: str = "") -> TokenSequence:
    """Dispatch used to build embedding sentences under the bundle's tokenizer mode."""
    if mode == "event":
        return tokenize_event(pv, description)
    if mode == "grammar":
        return tokenize_grammar(f"{pv} {description}", strip_numbers=False)
    if mode == "grammar_stripped":
        return tokenize_grammar(f"{pv} {description}", strip_numbers=True)
    raise ValueError(f"Unknown tokenizer mode '{mode}'")


def _check_forbidden(segment: str, pv: str):
    bad = sorted(set(segment) & FORBIDDEN_CHARACTERS)
    if bad:
        raise ForbiddenCharacter(f"'{''.join(bad)}' in '{pv}'")


def parse_channel_name(pv: str) -> ChannelParts:
    """
    Parses SysSubSys:DeviceID[-SubDevice]:Signal[_].
    Only the first two colons delimit; the signal may contain further colons.
    The DeviceID's maximal trailing digit run is the device instance.
    """
    parts = pv.split(":", 2)
    if len(parts) < 3:
        raise NotConvention(f"'{pv}' has fewer than two colons")
    sys_subsys, device_id, signal = parts

    _check_forbidden(sys_subsys, pv)
    _check_forbidden(signal, pv)

    sub_device = None
    if "-" in device_id:
        device_id, sub_device = device_id.split("-", 1)
        if not sub_device:
            raise NotConvention(f"empty SubDevice in '{pv}'")
        _check_forbidden(sub_device, pv)
    _check_forbidden(device_id, pv)

    device, device_instance = device_id, None
    match = _TRAILING_DIGITS.match(device_id)
    if match:
        device, digits = match.groups()
        # INVARIANT PROTECTED: Device instances are written without leading zeros.
        if len(digits) > 1 and digits.startswith("0"):
            raise BadDeviceInstance(f"device instance '{digits}' in '{pv}' has a leading zero")
        device_instance = int(digits)

    is_private = signal.endswith("_")
    if is_private:
        signal = signal[:-1]

    if not sys_subsys or not device or not signal:
        raise NotConvention(f"empty SysSubSys, Device or Signal in '{pv}'")

    return ChannelParts(
        sys_subsys=sys_subsys,
        device=device,
        signal=signal,
        device_instance=device_instance,
        sub_device=sub_device,
        is_private=is_private,
    )


def reassemble_channel_name(parts: ChannelParts) -> str:
    """Inverse of parse_channel_name."""
    device_id = parts.device
    if parts.device_instance is not None:
        device_id += str(parts.device_instance)
    if parts.sub_device is not None:
        device_id += f"-{parts.sub_device}"
    signal = parts.signal + ("_" if parts.is_private else "")
    return f"{parts.sys_subsys}:{device_id}:{signal}"


def build_flow_graph(pvs: Iterable[str], strip_numbers: bool = False) -> TokenFlowGraph:
    """
    Treats each grammar-tokenized PV as a path: one node per (depth, token), one edge per
    consecutive pair. Duplicate PVs count multiply. Names without usable tokens are skipped.
    """
    graph = TokenFlowGraph()
    for pv in pvs:
        try:
            path = tokenize_grammar(pv, strip_numbers).tokens
        except EmptyResult:
            graph.skipped += 1
            continue

        for depth, token in enumerate(path):
            key = (depth, token)
            graph.nodes[key] = graph.nodes.get(key, 0) + 1
            if depth + 1 < len(path):
                edge = (depth, token, path[depth + 1])
                graph.edges[edge] = graph.edges.get(edge, 0) + 1

    if graph.skipped:
        logger.warning("FLOW_SKIPPED: %d channel names had no usable tokens.", graph.skipped)
    logger.info("FLOW_GRAPH: %d nodes, %d edges.", len(graph.nodes), len(graph.edges))
    return graph


def export_sankey(graph: TokenFlowGraph) -> str:
    """
    Byte-stable JSON: nodes sorted by (depth, token) with ids assigned in that order,
    links sorted by (source_id, target_id).
    """
    ordered = sorted(graph.nodes.items())
    ids = {key: idx for idx, (key, _) in enumerate(ordered)}
    nodes: List[dict] = [
        {"id": ids[key], "token": key[1], "depth": key[0], "count": count}
        for key, count in ordered
    ]
    links = sorted(
        (
            {"source_id": ids[(depth, src)], "target_id": ids[(depth + 1, dst)], "count": count}
            for (depth, src, dst), count in graph.edges.items()
        ),
        key=lambda link: (link["source_id"], link["target_id"]),
    )
    return json.dumps({"nodes": nodes, "links": links}, separators=(",", ":"), ensure_ascii=True)
