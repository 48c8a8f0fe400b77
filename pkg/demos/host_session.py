# %% [markdown]
# Talking to a simulated device the way a host driver would.

# %%
from rpmb_emfi.controller import Device, load_device_profile
from rpmb_emfi.faults import PulseSpec, SimulatedInjector, load_fault_profile
from rpmb_emfi.host import connect

key = bytes(range(32))
injector = SimulatedInjector(load_fault_profile("target1"), 4)
device = Device(load_device_profile("target1"))
session = connect(device, injector, seed=4)
print("program key:", session.program_key(key))
print("write:", session.write_authenticated(0, b"hello".ljust(256, b"\0")))
print("counter:", session.read_counter())

# %% [markdown]
# A write with a random MAC, pulsed during the compare, until one lands.

# %%
pulse = PulseSpec(6.5, 4.5)
for attempt in range(1, 101):
    result, outcome = session.attack_write(1, b"\xEE" * 256, 117_900, pulse, injector)
    if str(outcome) == "Crash":
        session.hard_reset()
    if str(outcome) == "Success":
        break
print("attempts:", attempt, "outcome:", outcome)
print("block 1:", session.read_authenticated(1).data[:8].hex())
