"""Ready-made calculus programs, usable from tests and the CLI.

The word-count program routes integer "words" (0 or 1) from a main machine
to one counter machine per word; counters report (count * 10 + word) to a
max machine, which forwards every new maximum to a sink machine. The packed
payload keeps the calculus integer-only.
"""

WORD_EVENT = 10
FREQ_EVENT = 11

WORD_COUNT = """
(program
  (class Main
    (handler
      (if (= x_e 10)
          (if (= x_p 0)
              (send 2 10 x_p)
              (send 3 10 x_p))
          (skip))))
  (class Counter
    (persistent (count 0))
    (locals (c 0) (msg 0))
    (handler
      (seq
        (assign c (+ (load count) 1))
        (store count c)
        (assign msg (* c 10))
        (assign msg (+ msg x_p))
        (send 4 11 msg))))
  (class Max
    (persistent (hi 0))
    (locals (h 0) (gt 0))
    (handler
      (seq
        (assign h (load hi))
        (assign gt (> x_p h))
        (if gt
            (seq (store hi x_p) (send 5 11 x_p))
            (skip)))))
  (class Sink
    (handler (skip)))
  (init
    (machine 1 Main)
    (machine 2 Counter)
    (machine 3 Counter)
    (machine 4 Max)
    (machine 5 Sink)))
"""


def word_count_inbox(words) -> dict:
    """Initial inbox feeding *words* (integers 0/1) to the main machine."""
    return {1: [(99, WORD_EVENT, w) for w in words]}


# Three handler attempts' worth of sends; handy for transparency demos.
THREE_SENDS = """
(program
  (class Pinger
    (persistent (p 0))
    (volatile (scratch 0))
    (locals (t 0))
    (handler
      (seq
        (assign t (+ x_p 1))
        (store p t)
        (vassign scratch t)
        (send 2 7 t)
        (send 2 8 t)
        (send 1 9 t))))
  (class Sink
    (handler (skip)))
  (init
    (machine 1 Pinger)
    (machine 2 Sink)
    (inbox 1 (event 99 5 41))))
"""

# A handler that leaks a volatile field into a send payload; violates
# non-interference and makes crashes observable.
VOLATILE_LEAK = """
(program
  (class Leaky
    (persistent (p 0))
    (volatile (mood 0))
    (locals (t 0))
    (handler
      (seq
        (vassign mood (+ mood 1))
        (assign t mood)
        (send 2 7 t))))
  (class Sink
    (handler (skip)))
  (init
    (machine 1 Leaky)
    (machine 2 Sink)
    (inbox 1 (event 99 5 0))))
"""

EXAMPLES = {
    "word-count": WORD_COUNT,
    "three-sends": THREE_SENDS,
    "volatile-leak": VOLATILE_LEAK,
}
