from datetime import timedelta


def seconds_to_string(elapsed):

    # See https://stackoverflow.com/a/12344609/654755

    return str(timedelta(seconds=round(elapsed, 3)))


def format_mean_std(mean, std, digits=2):

    return '{0:.{2}f} ± {1:.{2}f}'.format(mean, std, digits)


def layers_to_string(layers):
    ''' Compact rendering of a layer index set: (0, 1, 2, 5) → “0-2,5”. '''

    layers = sorted(layers)

    if not layers:
        return '-'

    spans = []
    start = previous = layers[0]

    for layer in layers[1:]:
        if layer == previous + 1:
            previous = layer
            continue

        spans.append((start, previous))
        start = previous = layer

    spans.append((start, previous))

    return ','.join(
        str(first) if first == last else '{0}-{1}'.format(first, last)
        for first, last in spans
    )


def parse_layers(text):
    ''' Inverse of :func:`layers_to_string`. Accepts “0-2,5”, “3” or “-”. '''

    text = text.strip()

    if text in ('', '-'):
        return ()

    layers = []

    for part in text.split(','):
        if '-' in part:
            first, last = part.split('-', 1)
            layers.extend(range(int(first), int(last) + 1))

        else:
            layers.append(int(part))

    return tuple(sorted(set(layers)))
